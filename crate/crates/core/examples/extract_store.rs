//! Precomputed embeddings: encode images and prompts into a CLIPEMB1 store,
//! read it back and serve lookups from it.
//!
//! ```text
//! cargo run --example extract_store -- [out.clipemb]
//! ```

use std::path::PathBuf;

use clipmi::descriptors::DescriptorBank;
use clipmi::embedding::{resize_to_input, similarity, EncoderBackend};
use clipmi::pipeline::ImageInput;
use clipmi::store::{extract_store, raster_digest, CachedBackend, EmbeddingStore, StoreBackend};
use clipmi::world::SyntheticWorld;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("clipmi_example.clipemb"));
    let world = SyntheticWorld::standard(0, 2);
    let encoder = world.encoder()?;
    let bank = DescriptorBank::from_class_lists(&world.descriptors())?;

    let inputs = ImageInput::from_world(&world);
    let images: Vec<_> = inputs.iter().map(|i| (i.id.clone(), i.image.clone())).collect();
    let store = extract_store(&encoder, &images, &bank.prompts())?;
    store.save(&path)?;
    let bytes = std::fs::metadata(&path)?.len();
    println!(
        "{}: {} images, {} prompts, {bytes} bytes",
        path.display(),
        store.images().len(),
        store.num_texts()
    );

    let loaded = EmbeddingStore::load(&path)?;
    assert_eq!(loaded.to_bytes()?, store.to_bytes()?);
    println!("header {:?}", loaded.header());

    // Store-only lookups by id and by prompt text.
    let info = encoder.info().clone();
    let served = StoreBackend::new(loaded.clone(), info.input_size);
    let (emb, grid) = served.encode_image_id("img_003")?;
    let (direct, _) = encoder.encode_image(&resize_to_input(&inputs[3].image, &info)?)?;
    println!(
        "img_003 from store: {}x{} patches, cosine to a fresh encode {:.6}",
        grid.grid_h(),
        grid.grid_w(),
        similarity(&emb, &direct)?
    );
    let prompt = bank.prompt(0);
    println!("{prompt:?} stored: {}", loaded.text(&prompt).is_some());

    // A cached backend answers known rasters from the store and encodes the rest.
    let resized = resize_to_input(&inputs[0].image, &info)?;
    let digest = raster_digest(&resized);
    println!("digest {} known: {}", &digest[..12], loaded.image_by_digest(&digest).is_some());
    let cached = CachedBackend::new(loaded, encoder.clone())?;
    let (a, _) = cached.encode_image(&resized)?;
    let (b, _) = encoder.encode_image(&resized)?;
    println!("cached vs encoder cosine {:.6}", similarity(&a, &b)?);
    Ok(())
}
