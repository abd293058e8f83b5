//! Descriptor-based zero-shot classification boosted with descriptors taken
//! from explanations of each class's two nearest classes.
//!
//! ```text
//! cargo run --example boost -- [seed]
//! ```

use std::collections::BTreeMap;

use clipmi::boost::descriptor_boost;
use clipmi::config::RunConfig;
use clipmi::descriptors::DescriptorBank;
use clipmi::pipeline::{ImageInput, Pipeline};
use clipmi::world::SyntheticWorld;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let world = SyntheticWorld::standard(seed, 2);
    let encoder = world.encoder()?;
    let bank = DescriptorBank::from_class_lists(&world.descriptors())?;
    let classes = world.class_names();
    let config = RunConfig { u: 10, ..RunConfig::default() };
    let pipeline = Pipeline::new(config, &encoder, &classes, bank)?;

    let explanations = pipeline.explain(&ImageInput::from_world(&world))?;
    let mut found: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for e in &explanations {
        let ids = found.entry(e.analysis.label.expect("labelled")).or_default();
        for id in e.grounded.ranked_descriptor_ids() {
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
    }
    let bank = pipeline.bank();
    let base: Vec<Vec<u32>> = classes
        .iter()
        .map(|c| bank.class_ids(c).map(<[u32]>::to_vec).ok_or("class without descriptors"))
        .collect::<Result<_, _>>()?;
    let images: Vec<_> = explanations
        .iter()
        .map(|e| (e.analysis.embedding.clone(), e.analysis.label.expect("labelled")))
        .collect();

    let report = descriptor_boost(pipeline.classifier(), &base, &found, bank, &images, &encoder)?;
    for c in &report.per_class {
        let sample: Vec<&str> = c.added.iter().take(3).map(|&d| bank.text(d)).collect();
        println!(
            "{:<10} from {:?}: {} {:.2} -> {:.2}  +{} descriptors, e.g. {sample:?}",
            c.class,
            c.neighbours,
            if c.accepted { "kept   " } else { "dropped" },
            c.baseline_accuracy,
            c.boosted_accuracy,
            c.added.len()
        );
    }
    println!(
        "\naccuracy {:.3} -> {:.3} ({:+.3})",
        report.baseline_accuracy,
        report.boosted_accuracy,
        report.boosted_accuracy - report.baseline_accuracy
    );
    Ok(())
}
