//! Faithfulness of the concept ranking: deletion and insertion curves over
//! the concept regions, plus the accuracy-based AccDrop and AccInc.
//!
//! ```text
//! cargo run --example evaluate -- [kmeans|pca]
//! ```

use clipmi::concepts::ConceptMethod;
use clipmi::config::RunConfig;
use clipmi::descriptors::DescriptorBank;
use clipmi::eval::{acc_drop, acc_increase, accuracy, mean_auc};
use clipmi::pipeline::{ImageInput, Pipeline};
use clipmi::world::SyntheticWorld;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let method = match std::env::args().nth(1).as_deref() {
        None | Some("kmeans") => ConceptMethod::Kmeans,
        Some("pca") => ConceptMethod::Pca,
        Some(other) => return Err(format!("unknown method {other:?}").into()),
    };
    let world = SyntheticWorld::standard(0, 2);
    let encoder = world.encoder()?;
    let bank = DescriptorBank::from_class_lists(&world.descriptors())?;
    let config = RunConfig { method, ..RunConfig::default() };
    let pipeline = Pipeline::new(config, &encoder, &world.class_names(), bank)?;

    let explanations = pipeline.explain(&ImageInput::from_world(&world))?;
    let curves = pipeline.faithfulness_all(&explanations)?;
    for c in curves.iter().take(3) {
        println!("{} deletion  {:?}", c.image_id, round(&c.deletion.plot_scores()));
        println!("{} insertion {:?}", c.image_id, round(&c.insertion.plot_scores()));
    }

    let deletion: Vec<_> = curves.iter().map(|c| c.deletion.clone()).collect();
    let insertion: Vec<_> = curves.iter().map(|c| c.insertion.clone()).collect();
    let predictions: Vec<_> = explanations.iter().map(|e| e.analysis.prediction.clone()).collect();
    println!("\nmethod      {method}");
    println!("images      {}", explanations.len());
    println!("accuracy    {:.3}", accuracy(&predictions)?);
    println!("deletion    {:.4}  (lower is better)", mean_auc(&deletion)?);
    println!("insertion   {:.4}  (higher is better)", mean_auc(&insertion)?);
    println!("AccDrop     {:.4}", acc_drop(&deletion)?);
    println!("AccInc      {:.4}", acc_increase(&insertion)?);
    Ok(())
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}
