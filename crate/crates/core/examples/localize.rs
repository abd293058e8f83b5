//! Prominent-patch localization: patch affinity, the spectral split, the
//! largest connected component and CorLoc against the ground-truth box.
//!
//! ```text
//! cargo run --example localize -- [out_dir]
//! ```

use std::path::PathBuf;

use clipmi::embedding::{resize_to_input, EncoderBackend};
use clipmi::pipeline::ImageInput;
use clipmi::spectral::{affinity, corloc, fiedler_partition, largest_connected_component, mask_to_rgba, ProminenceMask};
use clipmi::world::SyntheticWorld;

fn ascii(mask: &ProminenceMask) -> String {
    let g = mask.geometry;
    let mut s = String::new();
    for r in 0..g.grid_h {
        for c in 0..g.grid_w {
            s.push(if mask.flags[r * g.grid_w + c] { '#' } else { '.' });
        }
        s.push('\n');
    }
    s
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from);
    let world = SyntheticWorld::standard(0, 2);
    let encoder = world.encoder()?;
    let info = encoder.info().clone();

    let mut hits = 0;
    let inputs = ImageInput::from_world(&world);
    for input in &inputs {
        let image = resize_to_input(&input.image, &info)?;
        let (_, patches) = encoder.encode_image(&image)?;
        let split = fiedler_partition(&affinity(&patches)?)?;
        let prominent = largest_connected_component(&split.mask)?;

        // The box is given at the source resolution.
        let gt = input.gt_box.expect("synthetic images have boxes");
        let (sx, sy) = (
            info.input_size as f64 / input.image.width() as f64,
            info.input_size as f64 / input.image.height() as f64,
        );
        let gt = clipmi::dataset::PixelBox { x0: gt.x0 * sx, y0: gt.y0 * sy, x1: gt.x1 * sx, y1: gt.y1 * sy };
        let loc = corloc(&prominent, &gt)?;
        hits += usize::from(loc.hit);
        println!(
            "{}  λ1={:.3} λ2={:.3}  split {:3} patches, LCC {:3}, IoU {:.3}",
            input.id,
            split.eigenvalues[0],
            split.eigenvalues[1],
            split.mask.count(),
            prominent.count(),
            loc.iou
        );
        if input.id == "img_000" {
            print!("{}", ascii(&prominent));
        }
        if let Some(dir) = &out {
            std::fs::create_dir_all(dir)?;
            mask_to_rgba(&prominent).save(dir.join(format!("{}_prominent.png", input.id)))?;
        }
    }
    println!("CorLoc {hits}/{}", inputs.len());
    Ok(())
}
