//! Mutual information between the vision-side concepts of each image and the
//! language-side concepts of its predicted class, with the ablation curve.
//!
//! ```text
//! cargo run --example mi -- [u]
//! ```

use clipmi::config::RunConfig;
use clipmi::descriptors::DescriptorBank;
use clipmi::mi::{aggregate_mi, contingency_mi, mi_dynamics, ConceptIdSet, MiRecord};
use clipmi::pipeline::{ImageInput, Pipeline};
use clipmi::world::SyntheticWorld;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let u: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(10);

    // Two small sets first: 3 shared ids out of 4 and 6.
    let x = ConceptIdSet::new(vec![1, 2, 3, 4])?;
    let y = ConceptIdSet::new(vec![2, 3, 4, 7, 8, 9])?;
    let v = contingency_mi(&x, &y);
    println!("toy: overlap {}, MI {:.4} bits (log2(4*6/3) = {:.4})", v.overlap, v.bits, 8f64.log2());
    let curve = mi_dynamics(&x, &y)?;
    println!("toy curve {:?}, AUC {:.4}\n", curve.values, curve.auc);

    let world = SyntheticWorld::standard(0, 3);
    let encoder = world.encoder()?;
    let bank = DescriptorBank::from_class_lists(&world.descriptors())?;
    let config = RunConfig { u, ..RunConfig::default() };
    let pipeline = Pipeline::new(config, &encoder, &world.class_names(), bank)?;

    let class0 = pipeline.class_concepts(0)?;
    let texts: Vec<&str> = class0.ids.iter().take(5).map(|&id| pipeline.bank().text(id)).collect();
    println!("language concepts of {:?} (first 5 of {u}): {texts:?}", pipeline.classifier().classes()[0]);

    let explanations = pipeline.explain(&ImageInput::from_world(&world))?;
    let mut records = Vec::new();
    for e in &explanations {
        let r = pipeline.mutual_information(e)?;
        let class = pipeline.classifier().classes()[r.predicted].clone();
        println!(
            "{} {:<10} |Dv|={:2} MI {:.3}  AUC {:.3}  curve {:?}",
            r.image_id,
            class,
            r.vision.len(),
            r.curve.values[0],
            r.curve.auc,
            r.curve.values.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
        );
        records.push(MiRecord { image_id: r.image_id, class, mi: r.curve.values[0], auc: r.curve.auc });
    }
    println!();
    for s in aggregate_mi(&records, true)? {
        println!("{:<10} n={:2}  mean MI {:.3}  mean AUC {:.3}", s.group, s.count, s.mean_mi, s.mean_auc);
    }
    Ok(())
}
