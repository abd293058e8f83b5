//! Deterministic analytic encoder.
//!
//! `SyntheticEncoder` stands in for a contrastive image/text model when no
//! weights are available. It is not learned, but it has the properties the
//! pipeline relies on:
//!
//! * Text is embedded as a weighted bag of words. Words in the lexicon carry
//!   full weight; any other token gets a hashed random direction and a small
//!   weight.
//! * A patch is "salient" when it is both chromatic and textured. Blurring
//!   removes texture and grayscaling removes chroma, so both erase a part from
//!   the embedding, the way detail removal hurts a real encoder.
//! * Salient patches are softly assigned to palette colours. Each palette
//!   colour maps to the text direction of its colour word, so an image
//!   region showing a colour lands near descriptors mentioning that word.
//! * Patch features share a strong common direction plus an "object"
//!   direction, which gives the affinity matrix a clean foreground/background
//!   split in its second eigenvector.

use std::collections::BTreeMap;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{
    resize_to_input, BackendInfo, EmbeddingVector, EncoderBackend, Facet, LayerNormTap,
    PatchFeatureGrid,
};
use crate::error::{Error, Result};

/// Weight of tokens that are not in the lexicon.
const FILLER_WEIGHT: f64 = 0.35;
/// Soft-assignment bandwidth in RGB units.
const PALETTE_BANDWIDTH: f64 = 20.0;
/// Mean intensity of a checker-textured patch relative to its base colour.
pub const TEXTURE_MEAN: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteColor {
    /// Colour word; its text direction is the colour's joint-space meaning.
    pub word: String,
    pub rgb: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub model_id: String,
    pub seed: u64,
    pub joint_dim: usize,
    pub feature_dim: usize,
    pub patch_size: usize,
    pub input_size: u32,
    pub facet: Facet,
    pub palette: Vec<PaletteColor>,
    /// Composite words, each a weighted mix of other lexicon words.
    pub compounds: BTreeMap<String, Vec<(String, f64)>>,
}

impl SyntheticConfig {
    pub fn with_palette(palette: Vec<PaletteColor>) -> Self {
        Self {
            model_id: "synthetic-v1".into(),
            seed: 7,
            joint_dim: 64,
            feature_dim: 48,
            patch_size: 16,
            input_size: 224,
            facet: Facet::Tokens,
            palette,
            compounds: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    config: SyntheticConfig,
    info: BackendInfo,
    lexicon: BTreeMap<String, Vec<f64>>,
    palette_joint: Vec<Vec<f64>>,
    palette_feature: Vec<Vec<f64>>,
    palette_ref: Vec<[f64; 3]>,
    common: Vec<f64>,
    background: Vec<f64>,
    luminance: Vec<f64>,
    scene: Vec<f64>,
    key_projection: Vec<f64>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= n;
    }
    v
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

impl SyntheticEncoder {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        if config.joint_dim == 0 || config.feature_dim == 0 {
            return Err(Error::Config("synthetic encoder needs non-zero dims".into()));
        }
        if config.palette.is_empty() {
            return Err(Error::Config("synthetic encoder needs a palette".into()));
        }
        PatchFeatureGrid::geometry_for(
            config.input_size as usize,
            config.input_size as usize,
            config.patch_size,
        )?;
        let info = BackendInfo {
            model_id: config.model_id.clone(),
            facet: config.facet,
            joint_dim: config.joint_dim,
            feature_dim: config.feature_dim,
            patch_size: config.patch_size,
            input_size: config.input_size,
            layer_norm: LayerNormTap::Post,
        };

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_f00d);
        let c = config.feature_dim;
        let common = unit_gaussian(&mut rng, c);
        let object = unit_gaussian(&mut rng, c);
        let background = unit_gaussian(&mut rng, c);
        let luminance = unit_gaussian(&mut rng, c);
        let palette_feature = config
            .palette
            .iter()
            .map(|_| {
                let r = unit_gaussian(&mut rng, c);
                let mut v: Vec<f64> = object.iter().zip(&r).map(|(o, r)| o + 0.8 * r).collect();
                normalize(&mut v);
                v
            })
            .collect();
        let key_projection: Vec<f64> = (0..c * c)
            .map(|_| StandardNormal.sample(&mut rng))
            .map(|x: f64| x / (c as f64).sqrt())
            .collect();

        let mut enc = Self {
            info,
            lexicon: BTreeMap::new(),
            palette_joint: Vec::new(),
            palette_feature,
            palette_ref: config
                .palette
                .iter()
                .map(|p| p.rgb.map(|x| x as f64 * TEXTURE_MEAN))
                .collect(),
            common,
            background,
            luminance,
            scene: Vec::new(),
            key_projection,
            config,
        };
        enc.scene = enc.hashed_direction("<scene>");
        for p in enc.config.palette.clone() {
            let v = enc.hashed_direction(&p.word.to_lowercase());
            enc.lexicon.insert(p.word.to_lowercase(), v.clone());
            enc.palette_joint.push(v);
        }
        // Resolved in name order against palette words and earlier compounds.
        for (word, parts) in enc.config.compounds.clone() {
            let mut v = vec![0.0; enc.config.joint_dim];
            for (part, weight) in parts {
                let dir = enc.word_direction(&part.to_lowercase());
                for (a, d) in v.iter_mut().zip(dir) {
                    *a += weight * d;
                }
            }
            normalize(&mut v);
            enc.lexicon.insert(word.to_lowercase(), v);
        }
        Ok(enc)
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    fn hashed_direction(&self, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.config.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(digest.as_slice());
        let mut rng = ChaCha8Rng::from_seed(seed);
        unit_gaussian(&mut rng, self.config.joint_dim)
    }

    fn word_direction(&self, token: &str) -> Vec<f64> {
        self.lexicon
            .get(token)
            .cloned()
            .unwrap_or_else(|| self.hashed_direction(token))
    }

    /// Joint-space direction of a single word.
    pub fn word_embedding(&self, word: &str) -> Result<EmbeddingVector> {
        EmbeddingVector::normalized_f64(&self.word_direction(&word.to_lowercase()))
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        let tokens = tokenize(text);
        let mut acc = vec![0.0; self.config.joint_dim];
        if tokens.is_empty() {
            acc = self.hashed_direction("<empty>");
        }
        for t in &tokens {
            let (dir, w) = match self.lexicon.get(t) {
                Some(v) => (v.clone(), 1.0),
                None => (self.hashed_direction(t), FILLER_WEIGHT),
            };
            for (a, d) in acc.iter_mut().zip(dir) {
                *a += w * d;
            }
        }
        EmbeddingVector::normalized_f64(&acc)
    }

    /// Per-patch statistics: mean RGB, luminance texture energy.
    fn patch_stats(image: &RgbImage, px: usize, py: usize, p: usize) -> ([f64; 3], f64) {
        let mut mean = [0.0f64; 3];
        let mut energy = 0.0;
        let mut pairs = 0usize;
        let lum = |x: u32, y: u32| {
            let q = image.get_pixel(x, y).0;
            0.299 * q[0] as f64 + 0.587 * q[1] as f64 + 0.114 * q[2] as f64
        };
        for dy in 0..p {
            for dx in 0..p {
                let x = (px * p + dx) as u32;
                let y = (py * p + dy) as u32;
                let q = image.get_pixel(x, y).0;
                for k in 0..3 {
                    mean[k] += q[k] as f64;
                }
                let l = lum(x, y);
                if dx + 1 < p {
                    energy += (l - lum(x + 1, y)).abs();
                    pairs += 1;
                }
                if dy + 1 < p {
                    energy += (l - lum(x, y + 1)).abs();
                    pairs += 1;
                }
            }
        }
        let n = (p * p) as f64;
        for m in &mut mean {
            *m /= n;
        }
        (mean, energy / pairs.max(1) as f64)
    }

    fn saliency(mean: [f64; 3], texture: f64) -> f64 {
        let max = mean.iter().cloned().fold(f64::MIN, f64::max);
        let min = mean.iter().cloned().fold(f64::MAX, f64::min);
        let chroma = (max - min) / 255.0;
        let chroma_gate = ((chroma - 0.1) / 0.2).clamp(0.0, 1.0);
        let texture_gate = ((texture - 2.5) / 6.0).clamp(0.0, 1.0);
        chroma_gate * texture_gate
    }

    fn soft_assign(&self, mean: [f64; 3]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .palette_ref
            .iter()
            .map(|r| {
                let d2: f64 = (0..3).map(|k| (mean[k] - r[k]).powi(2)).sum();
                -d2 / (2.0 * PALETTE_BANDWIDTH * PALETTE_BANDWIDTH)
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let mut w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = w.iter().sum();
        for x in &mut w {
            *x /= s;
        }
        w
    }
}

impl EncoderBackend for SyntheticEncoder {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn encode_image(&self, image: &RgbImage) -> Result<(EmbeddingVector, PatchFeatureGrid)> {
        let image = resize_to_input(image, &self.info)?;
        let p = self.config.patch_size;
        let (gh, gw) = PatchFeatureGrid::geometry_for(
            image.height() as usize,
            image.width() as usize,
            p,
        )?;
        let c = self.config.feature_dim;
        let mut features = Vec::with_capacity(gh * gw * c);
        let mut joint = vec![0.0f64; self.config.joint_dim];
        let mut background_mass = 0.0;
        for py in 0..gh {
            for px in 0..gw {
                let (mean, texture) = Self::patch_stats(&image, px, py, p);
                let s = Self::saliency(mean, texture);
                let w = self.soft_assign(mean);
                let lum = (0.299 * mean[0] + 0.587 * mean[1] + 0.114 * mean[2]) / 255.0;

                let mut f = vec![0.0f64; c];
                for k in 0..c {
                    f[k] = 1.5 * self.common[k]
                        + (1.0 - s) * self.background[k]
                        + 0.1 * (lum - 0.5) * self.luminance[k];
                }
                for (j, wj) in w.iter().enumerate() {
                    if *wj < 1e-12 {
                        continue;
                    }
                    for k in 0..c {
                        f[k] += s * wj * self.palette_feature[j][k];
                    }
                    for (a, t) in joint.iter_mut().zip(&self.palette_joint[j]) {
                        *a += s * wj * t;
                    }
                }
                background_mass += 1.0 - s;
                if self.config.facet == Facet::Keys {
                    let tokens = f.clone();
                    for (r, out) in f.iter_mut().enumerate() {
                        *out = (0..c).map(|k| self.key_projection[r * c + k] * tokens[k]).sum();
                    }
                }
                features.extend(f.into_iter().map(|x| x as f32));
            }
        }
        let scene_weight = 0.02 * background_mass + 1e-3;
        for (a, s) in joint.iter_mut().zip(&self.scene) {
            *a += scene_weight * s;
        }
        let grid = PatchFeatureGrid::new(features, c, gh, gw, p, self.config.facet)?;
        Ok((EmbeddingVector::normalized_f64(&joint)?, grid))
    }

    fn encode_texts(&self, prompts: &[String]) -> Result<Vec<EmbeddingVector>> {
        prompts.iter().map(|p| self.embed_text(p)).collect()
    }
}
