//! Synthetic labelled image world used for the committed fixture.
//!
//! Every class is a three-part creature (body, head, tail) painted with
//! checker-textured palette colours on a flat, nearly achromatic background.
//! The body colour is unique to the class; head and tail colours come from a
//! shared pool, so neighbouring classes overlap in some descriptors. Class
//! names are lexicon compounds of their part colours, which is what makes
//! zero-shot classification work under [`SyntheticEncoder`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, DatasetItem, PixelBox};
use crate::error::{Error, Result};
use crate::synthetic::{PaletteColor, SyntheticConfig, SyntheticEncoder};

const IMAGE_SIZE: u32 = 224;
const BACKGROUND: [f64; 3] = [188.0, 184.0, 176.0];
const CHECKER_LOW: f64 = 0.6;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub body: usize,
    pub head: usize,
    pub tail: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub palette: Vec<PaletteColor>,
    pub classes: Vec<ClassSpec>,
    pub images_per_class: usize,
}

const SIGNATURE: [(&str, [u8; 3]); 10] = [
    ("crimson", [200, 30, 40]),
    ("orange", [235, 120, 20]),
    ("gold", [225, 195, 35]),
    ("lime", [130, 205, 35]),
    ("emerald", [25, 165, 75]),
    ("teal", [25, 160, 160]),
    ("azure", [40, 115, 225]),
    ("indigo", [90, 60, 200]),
    ("violet", [160, 50, 205]),
    ("magenta", [215, 45, 150]),
];

const SHARED: [(&str, [u8; 3]); 5] = [
    ("brown", [150, 85, 35]),
    ("pink", [240, 150, 190]),
    ("olive", [135, 135, 25]),
    ("navy", [35, 50, 140]),
    ("cyan", [70, 215, 235]),
];

const CLASS_NAMES: [&str; 10] = [
    "heron",
    "fox",
    "canary",
    "mantis",
    "frog",
    "koi",
    "jay",
    "beetle",
    "ibis",
    "flamingo",
];

/// (head, tail) indices into the shared pool, per class.
const PARTS: [(usize, usize); 10] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (4, 0),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 0),
    (4, 1),
];

const FILLERS: [&str; 12] = [
    "often found near water",
    "has a slender build",
    "active during the day",
    "moves in short bursts",
    "seen in tropical regions",
    "has a smooth outline",
    "lives among tall grass",
    "rests in sheltered spots",
    "has a compact shape",
    "appears in small groups",
    "seen in gardens",
    "has a symmetric form",
];

/// Relative joint-space weights of body, head and tail in class names.
const PART_WEIGHTS: [f64; 3] = [0.7, 0.25, 0.12];

impl SyntheticWorld {
    /// The 10-class world the fixture is generated from.
    pub fn standard(seed: u64, images_per_class: usize) -> Self {
        let palette: Vec<PaletteColor> = SIGNATURE
            .iter()
            .chain(SHARED.iter())
            .map(|(w, rgb)| PaletteColor {
                word: (*w).to_string(),
                rgb: *rgb,
            })
            .collect();
        let classes = CLASS_NAMES
            .iter()
            .zip(PARTS)
            .enumerate()
            .map(|(i, (name, (h, t)))| ClassSpec {
                name: (*name).to_string(),
                body: i,
                head: SIGNATURE.len() + h,
                tail: SIGNATURE.len() + t,
            })
            .collect();
        Self {
            seed,
            palette,
            classes,
            images_per_class,
        }
    }

    /// Encoder whose lexicon knows this world's class names.
    pub fn encoder_config(&self) -> SyntheticConfig {
        let mut cfg = SyntheticConfig::with_palette(self.palette.clone());
        cfg.seed = self.seed;
        for class in &self.classes {
            let parts = [class.body, class.head, class.tail]
                .iter()
                .zip(PART_WEIGHTS)
                .map(|(&p, w)| (self.palette[p].word.clone(), w))
                .collect();
            cfg.compounds.insert(class.name.clone(), parts);
        }
        cfg
    }

    pub fn encoder(&self) -> Result<SyntheticEncoder> {
        SyntheticEncoder::new(self.encoder_config())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Per-class descriptor lists in the class → [descriptor] JSON layout.
    pub fn descriptors(&self) -> BTreeMap<String, Vec<String>> {
        let mut out = BTreeMap::new();
        for (i, class) in self.classes.iter().enumerate() {
            let body = &self.palette[class.body].word;
            let head = &self.palette[class.head].word;
            let tail = &self.palette[class.tail].word;
            let mut list = vec![
                format!("{body} patterned body"),
                format!("large {body} patch"),
                format!("{head} rounded head"),
                format!("{tail} narrow tail"),
                format!("{head} markings"),
            ];
            for k in 0..3 {
                list.push(FILLERS[(i * 3 + k * 5) % FILLERS.len()].to_string());
            }
            out.insert(class.name.clone(), list);
        }
        out
    }

    /// Renders image `index` of class `class`, returning the object's box.
    pub fn render(&self, class: usize, index: usize) -> (RgbImage, PixelBox) {
        let spec = &self.classes[class];
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((class * 1000 + index) as u64),
        );
        let scale: f64 = rng.random_range(0.9..1.1);
        let dir: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let rx = 52.0 * scale;
        let ry = 34.0 * scale;
        let hr = 22.0 * scale;
        let head_dx = rx + 12.0 * scale;
        let head_dy = -18.0 * scale;
        let tail_len = 48.0 * scale;
        let tail_half = 9.0 * scale;
        let left_ext = rx + tail_len - 8.0 * scale;
        let right_ext = head_dx + hr;
        let (ext_neg, ext_pos) = if dir > 0.0 {
            (left_ext, right_ext)
        } else {
            (right_ext, left_ext)
        };
        let margin = 6.0;
        let size = IMAGE_SIZE as f64;
        let cx: f64 = rng.random_range((ext_neg + margin)..(size - ext_pos - margin));
        let top_ext = (ry).max(-head_dy + hr);
        let cy: f64 = rng.random_range((top_ext + margin)..(size - ry - margin));
        let gradient: f64 = rng.random_range(-6.0..6.0);

        let colour = |p: usize| self.palette[p].rgb.map(|v| v as f64);
        let body = colour(spec.body);
        let head = colour(spec.head);
        let tail = colour(spec.tail);

        let mut bbox: Option<(u32, u32, u32, u32)> = None;
        let mut img = RgbImage::new(IMAGE_SIZE, IMAGE_SIZE);
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let fx = x as f64 + 0.5;
                let fy = y as f64 + 0.5;
                let in_body = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2) <= 1.0;
                let hx = cx + dir * head_dx;
                let hy = cy + head_dy;
                let in_head = (fx - hx).powi(2) + (fy - hy).powi(2) <= hr * hr;
                let tx0 = cx - dir * (rx - 8.0 * scale);
                let tx1 = cx - dir * (rx - 8.0 * scale + tail_len);
                let (tmin, tmax) = if tx0 < tx1 { (tx0, tx1) } else { (tx1, tx0) };
                let in_tail = fx >= tmin && fx <= tmax && (fy - cy).abs() <= tail_half;

                let base = if in_head {
                    Some(head)
                } else if in_body {
                    Some(body)
                } else if in_tail {
                    Some(tail)
                } else {
                    None
                };
                let noise: f64 = rng.random_range(-3.0..3.0);
                let px = match base {
                    Some(c) => {
                        bbox = Some(match bbox {
                            None => (x, y, x + 1, y + 1),
                            Some((a, b, c2, d)) => (a.min(x), b.min(y), c2.max(x + 1), d.max(y + 1)),
                        });
                        let f = if ((x / 2) + (y / 2)) % 2 == 0 { 1.0 } else { CHECKER_LOW };
                        c.map(|v| v * f + noise)
                    }
                    None => {
                        let g = gradient * (fy / size - 0.5);
                        BACKGROUND.map(|v| v + g + noise)
                    }
                };
                img.put_pixel(x, y, Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8)));
            }
        }
        let (x0, y0, x1, y1) = bbox.expect("object is always inside the frame");
        (
            img,
            PixelBox {
                x0: x0 as f64,
                y0: y0 as f64,
                x1: x1 as f64,
                y1: y1 as f64,
            },
        )
    }

    /// Writes images, labels, class list, descriptors and encoder config to
    /// `dir` and returns the loaded dataset.
    pub fn write(&self, dir: &Path) -> Result<Dataset> {
        fs::create_dir_all(dir.join("images")).map_err(Error::at(dir))?;
        let mut items = Vec::new();
        for (c, _) in self.classes.iter().enumerate() {
            for i in 0..self.images_per_class {
                let id = format!("img_{:03}", c * self.images_per_class + i);
                let file = format!("images/{id}.png");
                let (img, bbox) = self.render(c, i);
                crate::report::save_png(&dir.join(&file), &img, &[])?;
                items.push(DatasetItem {
                    id,
                    file,
                    label: c,
                    gt_box: Some(bbox),
                });
            }
        }
        let dataset = Dataset {
            root: dir.to_path_buf(),
            classes: self.class_names(),
            items,
        };
        dataset.save_metadata()?;
        crate::report::write_atomic(
            &dir.join("descriptors.json"),
            &serde_json::to_vec_pretty(&self.descriptors())?,
        )?;
        crate::report::write_atomic(
            &dir.join("encoder.json"),
            &serde_json::to_vec_pretty(&self.encoder_config())?,
        )?;
        Ok(dataset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let w = SyntheticWorld::standard(3, 2);
        let (a, ba) = w.render(4, 1);
        let (b, bb) = w.render(4, 1);
        assert_eq!(a, b);
        assert_eq!(ba, bb);
    }

    #[test]
    fn object_occupies_a_minority_of_the_frame() {
        let w = SyntheticWorld::standard(3, 5);
        for c in 0..w.classes.len() {
            for i in 0..5 {
                let (_, b) = w.render(c, i);
                let area = (b.x1 - b.x0) * (b.y1 - b.y0);
                assert!(area < 0.5 * 224.0 * 224.0, "class {c} image {i}");
                assert!(b.x0 >= 0.0 && b.x1 <= 224.0 && b.y0 >= 0.0 && b.y1 <= 224.0);
            }
        }
    }

    #[test]
    fn shared_descriptors_repeat_across_classes() {
        let w = SyntheticWorld::standard(3, 5);
        let d = w.descriptors();
        let total: usize = d.values().map(|v| v.len()).sum();
        let unique: std::collections::BTreeSet<_> = d.values().flatten().collect();
        assert!(unique.len() < total);
    }
}
