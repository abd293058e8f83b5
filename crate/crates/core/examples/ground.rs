//! Grounding visual concepts in text: score every concept region against the
//! descriptor bank, keep the candidates above the row median, solve the
//! transport problem and read off the descriptors.
//!
//! ```text
//! cargo run --example ground -- [image_index]
//! ```

use std::collections::BTreeSet;

use clipmi::config::RunConfig;
use clipmi::descriptors::DescriptorBank;
use clipmi::grounding::{argmax_assignment, diversity_entropy, score_concepts, sinkhorn_assign, SinkhornOptions};
use clipmi::pipeline::{ImageInput, Pipeline};
use clipmi::prompting::region_embedding;
use clipmi::world::SyntheticWorld;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let index: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let world = SyntheticWorld::standard(0, 3);
    let encoder = world.encoder()?;
    let bank = DescriptorBank::from_class_lists(&world.descriptors())?;
    let config = RunConfig { u: 10, ..RunConfig::default() };
    let pipeline = Pipeline::new(config, &encoder, &world.class_names(), bank)?;

    let explanations = pipeline.explain(&ImageInput::from_world(&world))?;
    let e = explanations.get(index).ok_or("image index out of range")?;
    let bank = pipeline.bank();
    println!(
        "{} (label {:?}, predicted {:?})",
        e.analysis.id,
        pipeline.classifier().classes()[e.analysis.label.unwrap_or_default()],
        pipeline.classifier().classes()[e.analysis.prediction.predicted]
    );
    for g in &e.grounded.concepts {
        println!("concept {} ({} patches, importance {:.4})", g.concept, g.patches.len(), g.importance);
        for d in &g.descriptors {
            println!("    {:<32} score {:.4}  mass {:.2e}", bank.text(d.id), d.score, d.mass);
        }
    }
    if !e.flags.is_empty() {
        println!("flags {:?}", e.flags);
    }

    // The same concepts assigned by plain argmax, without transport.
    let present = e.segmentation.present();
    let regions = present
        .iter()
        .map(|&c| {
            let region = e.segmentation.concept_region(c)?;
            Ok(region_embedding(&e.analysis.image, &region, 16, &encoder)?.embedding)
        })
        .collect::<clipmi::error::Result<Vec<_>>>()?;
    let mut scores = score_concepts(&regions, bank)?;
    scores.apply_filter(pipeline.config().k)?;
    let plan = sinkhorn_assign(&scores, &SinkhornOptions::default())?;
    let argmax: Vec<u32> = argmax_assignment(&scores).into_iter().flatten().collect();
    let distinct: BTreeSet<u32> = argmax.iter().copied().collect();
    println!(
        "\nSinkhorn: {} iterations, converged {}; top-1 entropy {:.3} bits",
        plan.iterations,
        plan.converged,
        e.grounded.diversity()
    );
    println!(
        "argmax:   {} distinct of {}; top-1 entropy {:.3} bits",
        distinct.len(),
        argmax.len(),
        diversity_entropy(&argmax)
    );
    Ok(())
}
