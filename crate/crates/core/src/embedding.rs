//! Encoder outputs and the backend interface.
//!
//! Everything downstream of the encoders only sees [`EncoderBackend`]. A
//! backend turns an RGB raster into a joint-space [`EmbeddingVector`] plus the
//! pre-projection [`PatchFeatureGrid`], and turns prompt strings into joint-space
//! vectors. Three implementations ship with the crate: the precomputed
//! [`StoreBackend`](crate::store::StoreBackend), the analytic
//! [`SyntheticEncoder`](crate::synthetic::SyntheticEncoder) used for fixtures,
//! and (feature `onnx`) an interchange-format inference backend.

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the L2 norm of joint-space vectors.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// A vector in the shared image/text embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Wraps raw values without touching them. Stores use this so that
    /// round trips stay bit-exact.
    pub fn from_raw(values: Vec<f32>) -> Self {
        Self(values)
    }

    /// Scales `values` to unit L2 norm. Fails on the zero vector.
    pub fn normalized(values: Vec<f32>) -> Result<Self> {
        let norm = l2_norm(&values);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidInput(
                "cannot normalize a zero or non-finite vector".into(),
            ));
        }
        Ok(Self(values.iter().map(|v| (*v as f64 / norm) as f32).collect()))
    }

    /// Normalizes an f64 accumulator.
    pub fn normalized_f64(values: &[f64]) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidInput(
                "cannot normalize a zero or non-finite vector".into(),
            ));
        }
        Ok(Self(values.iter().map(|v| (v / norm) as f32).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() < UNIT_NORM_TOL
    }

    /// Renormalized mean of several vectors of equal dimension.
    pub fn mean_normalized<'a, I>(vectors: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a EmbeddingVector>,
    {
        let mut acc: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for v in vectors {
            if acc.is_empty() {
                acc = vec![0.0; v.dim()];
            } else if v.dim() != acc.len() {
                return Err(Error::DimensionMismatch {
                    what: "embedding",
                    expected: acc.len(),
                    found: v.dim(),
                });
            }
            for (a, x) in acc.iter_mut().zip(v.values()) {
                *a += *x as f64;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::InvalidInput("mean of zero vectors".into()));
        }
        for a in &mut acc {
            *a /= count as f64;
        }
        Self::normalized_f64(&acc)
    }
}

pub(crate) fn l2_norm(values: &[f32]) -> f64 {
    values.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt()
}

/// Dot product accumulated in f64. Both inputs are expected to be unit norm,
/// so the score is the cosine similarity.
pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    dot(a.values(), b.values())
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "embedding",
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum())
}

/// Which internal tensor of the vision transformer supplies patch features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Facet {
    /// Last-layer token outputs.
    #[default]
    Tokens,
    /// Key projections of the last attention layer.
    Keys,
}

impl fmt::Display for Facet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Facet::Tokens => "tokens",
            Facet::Keys => "keys",
        })
    }
}

impl FromStr for Facet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tokens" => Ok(Facet::Tokens),
            "keys" => Ok(Facet::Keys),
            other => Err(Error::Config(format!("unknown facet {other:?}"))),
        }
    }
}

/// Whether patch features were tapped before or after the final layer norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LayerNormTap {
    Pre,
    #[default]
    Post,
}

/// Per-image patch features, N rows of C channels, row-major over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureGrid {
    features: Vec<f32>,
    channels: usize,
    grid_h: usize,
    grid_w: usize,
    patch_size: usize,
    facet: Facet,
}

impl PatchFeatureGrid {
    pub fn new(
        features: Vec<f32>,
        channels: usize,
        grid_h: usize,
        grid_w: usize,
        patch_size: usize,
        facet: Facet,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidInput("patch features need C > 0".into()));
        }
        let n = grid_h * grid_w;
        if features.len() != n * channels {
            return Err(Error::DimensionMismatch {
                what: "patch feature grid",
                expected: n * channels,
                found: features.len(),
            });
        }
        Ok(Self {
            features,
            channels,
            grid_h,
            grid_w,
            patch_size,
            facet,
        })
    }

    /// Grid geometry for a raster of `height`×`width` pixels.
    pub fn geometry_for(height: usize, width: usize, patch_size: usize) -> Result<(usize, usize)> {
        if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
            return Err(Error::InvalidInput(format!(
                "{height}x{width} image is not divisible by patch size {patch_size}"
            )));
        }
        Ok((height / patch_size, width / patch_size))
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn facet(&self) -> Facet {
        self.facet
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, patch: usize) -> &[f32] {
        &self.features[patch * self.channels..(patch + 1) * self.channels]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.features.chunks_exact(self.channels)
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            patch_size: self.patch_size,
        }
    }

    /// Uniformly rescaled copy, mostly useful for invariance checks.
    pub fn scaled(&self, factor: f32) -> Self {
        let mut out = self.clone();
        for v in &mut out.features {
            *v *= factor;
        }
        out
    }
}

/// Patch-grid shape shared by masks, segmentations and feature grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
}

impl GridGeometry {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn pixel_height(&self) -> usize {
        self.grid_h * self.patch_size
    }

    pub fn pixel_width(&self) -> usize {
        self.grid_w * self.patch_size
    }
}

/// Static description of an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub model_id: String,
    pub facet: Facet,
    /// Joint-space dimension c.
    pub joint_dim: usize,
    /// Patch feature channels C.
    pub feature_dim: usize,
    pub patch_size: usize,
    /// Square input resolution expected by the vision tower.
    pub input_size: u32,
    #[serde(default)]
    pub layer_norm: LayerNormTap,
}

impl BackendInfo {
    pub fn grid(&self) -> GridGeometry {
        let side = self.input_size as usize / self.patch_size.max(1);
        GridGeometry {
            grid_h: side,
            grid_w: side,
            patch_size: self.patch_size,
        }
    }
}

/// Uniform access to a vision/language encoder pair.
///
/// Implementations must be deterministic: the same raster or prompt always
/// yields the same bits. Callers never assume a single model instance is
/// reentrant; backends that wrap one serialize calls internally.
pub trait EncoderBackend: Send + Sync {
    fn info(&self) -> &BackendInfo;

    /// Joint embedding and patch grid for one image.
    fn encode_image(&self, image: &RgbImage) -> Result<(EmbeddingVector, PatchFeatureGrid)>;

    /// One unit-norm joint embedding per prompt, in order.
    fn encode_texts(&self, prompts: &[String]) -> Result<Vec<EmbeddingVector>>;

    /// Joint embedding only.
    fn embed_image(&self, image: &RgbImage) -> Result<EmbeddingVector> {
        self.encode_image(image).map(|(v, _)| v)
    }
}

impl<B: EncoderBackend + ?Sized> EncoderBackend for &B {
    fn info(&self) -> &BackendInfo {
        (**self).info()
    }

    fn encode_image(&self, image: &RgbImage) -> Result<(EmbeddingVector, PatchFeatureGrid)> {
        (**self).encode_image(image)
    }

    fn encode_texts(&self, prompts: &[String]) -> Result<Vec<EmbeddingVector>> {
        (**self).encode_texts(prompts)
    }
}

impl<B: EncoderBackend + ?Sized> EncoderBackend for Box<B> {
    fn info(&self) -> &BackendInfo {
        (**self).info()
    }

    fn encode_image(&self, image: &RgbImage) -> Result<(EmbeddingVector, PatchFeatureGrid)> {
        (**self).encode_image(image)
    }

    fn encode_texts(&self, prompts: &[String]) -> Result<Vec<EmbeddingVector>> {
        (**self).encode_texts(prompts)
    }
}

/// Resizes `image` to the backend's square input resolution. Returns a plain
/// copy when it already matches.
pub fn resize_to_input(image: &RgbImage, info: &BackendInfo) -> Result<RgbImage> {
    let side = info.input_size;
    PatchFeatureGrid::geometry_for(side as usize, side as usize, info.patch_size)?;
    if image.width() == side && image.height() == side {
        return Ok(image.clone());
    }
    Ok(image::imageops::resize(
        image,
        side,
        side,
        image::imageops::FilterType::Triangle,
    ))
}
