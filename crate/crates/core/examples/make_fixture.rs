//! Regenerates the committed 10-class fixture.
//!
//! ```text
//! cargo run --example make_fixture -- [out_dir] [seed] [images_per_class]
//! ```

use std::path::PathBuf;

use clipmi::descriptors::{instantiate, DescriptorBank, IMAGENET_TEMPLATES};
use clipmi::store::extract_store;
use clipmi::world::SyntheticWorld;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic10"));
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let per_class: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);

    let world = SyntheticWorld::standard(seed, per_class);
    let dataset = world.write(&out)?;
    let encoder = world.encoder()?;

    let images = dataset
        .items
        .iter()
        .map(|i| Ok((i.id.clone(), dataset.load_image(i)?)))
        .collect::<clipmi::error::Result<Vec<_>>>()?;
    let bank = DescriptorBank::from_class_lists(&world.descriptors())?;
    let mut prompts = bank.prompts();
    for t in IMAGENET_TEMPLATES {
        prompts.extend(dataset.classes.iter().map(|c| instantiate(t, c)));
    }
    let store = extract_store(&encoder, &images, &prompts)?;
    store.save(out.join("reference.clipemb"))?;

    println!(
        "wrote {} images, {} descriptors, {} prompts to {}",
        dataset.items.len(),
        bank.len(),
        store.num_texts(),
        out.display()
    );
    Ok(())
}
