//! Visual prompting of concept regions: a red ellipse, a blurred background
//! and a grayscale background, averaged into one region embedding.
//!
//! ```text
//! cargo run --example prompts -- [out_dir]
//! ```

use std::path::PathBuf;

use clipmi::config::RunConfig;
use clipmi::descriptors::DescriptorBank;
use clipmi::embedding::{similarity, EncoderBackend};
use clipmi::pipeline::{ImageInput, Pipeline};
use clipmi::prompting::{region_embedding, render, PromptVariant, RegionPrompt};
use clipmi::world::SyntheticWorld;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from);
    let world = SyntheticWorld::standard(0, 3);
    let encoder = world.encoder()?;
    let bank = DescriptorBank::from_class_lists(&world.descriptors())?;
    let pipeline = Pipeline::new(RunConfig::default(), &encoder, &world.class_names(), bank)?;

    let inputs: Vec<ImageInput> = ImageInput::from_world(&world).into_iter().take(3).collect();
    let explanations = pipeline.explain(&inputs)?;
    let e = &explanations[0];
    let image = &e.analysis.image;
    let padding = encoder.info().patch_size as u32;
    let class_row = pipeline.classifier().row(e.analysis.prediction.predicted);

    println!("{}: predicted {:?}", e.analysis.id, pipeline.classifier().classes()[e.analysis.prediction.predicted]);
    for concept in e.segmentation.present() {
        let region = e.segmentation.concept_region(concept)?;
        let emb = region_embedding(image, &region, padding, &encoder)?;
        println!(
            "concept {concept}: {} px, s(image, region) {:.4}, s(class, region) {:.4}, flags {:?}",
            region.count(),
            similarity(&e.analysis.embedding, &emb.embedding)?,
            similarity(class_row, &emb.embedding)?,
            emb.flags
        );
        for (variant, v) in PromptVariant::ALL.into_iter().zip(&emb.variants) {
            println!("    {:<18} s(image, ·) {:.4}", variant.to_string(), similarity(&e.analysis.embedding, v)?);
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir)?;
                let r = render(&RegionPrompt { image, region: &region, variant, padding })?;
                r.image.save(dir.join(format!("concept{concept}_{variant}.png")))?;
            }
        }
    }
    Ok(())
}
