//! Visual concepts: cluster the prominent patches of one class with k-means
//! and with PCA, then print each image's concept map.
//!
//! ```text
//! cargo run --example concepts -- [class_index] [L]
//! ```

use clipmi::concepts::{fit_concepts, ConceptMethod, ConceptOptions, ConceptSegmentation};
use clipmi::config::RunConfig;
use clipmi::descriptors::DescriptorBank;
use clipmi::pipeline::{ImageInput, Pipeline};
use clipmi::world::SyntheticWorld;

fn print_map(seg: &ConceptSegmentation) {
    let g = seg.geometry;
    for r in 0..g.grid_h {
        let row: String = (0..g.grid_w)
            .map(|c| match seg.labels[r * g.grid_w + c] {
                Some(l) => char::from_digit(l as u32, 36).unwrap_or('?'),
                None => '.',
            })
            .collect();
        println!("  {row}");
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let class: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let l: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);

    let world = SyntheticWorld::standard(0, 3);
    let encoder = world.encoder()?;
    let bank = DescriptorBank::from_class_lists(&world.descriptors())?;
    let pipeline = Pipeline::new(RunConfig::default(), &encoder, &world.class_names(), bank)?;

    let inputs: Vec<ImageInput> = ImageInput::from_world(&world)
        .into_iter()
        .filter(|i| i.label == Some(class))
        .collect();
    let analyses = pipeline.analyze_all(&inputs)?;
    let pairs: Vec<_> = analyses.iter().map(|a| (&a.patches, &a.prominent)).collect();
    println!("class {:?}, {} images", pipeline.classifier().classes()[class], analyses.len());

    for method in [ConceptMethod::Kmeans, ConceptMethod::Pca] {
        let options = ConceptOptions { method, l, seed: 0, normalize: true };
        let fit = fit_concepts(&pairs, &options)?;
        println!("\n{method}: {} concepts used, flags {:?}", fit.l_used, fit.flags);
        if let (Some(first), Some(last)) = (fit.inertia.first(), fit.inertia.last()) {
            println!("inertia {first:.4} -> {last:.4} over {} steps", fit.inertia.len());
        }
        for (a, seg) in analyses.iter().zip(&fit.segmentations) {
            let sizes: Vec<usize> = (0..fit.l_used).map(|c| seg.patch_count(c)).collect();
            println!("{}  patches per concept {sizes:?}", a.id);
        }
        print_map(&fit.segmentations[0]);
    }
    Ok(())
}
