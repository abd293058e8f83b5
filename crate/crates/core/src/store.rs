//! `CLIPEMB1` embedding stores.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"CLIPEMB1"            8 bytes
//! header_len: u32        4 bytes
//! header: UTF-8 JSON     header_len bytes
//! payload: f32 tensors   row-major, in the order of header.tensors
//! ```
//!
//! The header records `model_id`, `facet`, `c` (joint dim), `C` (patch
//! channels), `patch_size` and `counts`, followed by per-image metadata, the
//! prompt table and the tensor list. Each image contributes an
//! `image/<id>/joint` (1×c) and an `image/<id>/patches` (N×C) tensor; the text
//! table is a single `text/joint` (T×c) tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{
    BackendInfo, EmbeddingVector, EncoderBackend, Facet, LayerNormTap, PatchFeatureGrid,
};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CLIPEMB1";
const DTYPE: &str = "float32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub model_id: String,
    pub facet: Facet,
    /// Joint-space dimension.
    pub c: usize,
    /// Patch feature channels.
    #[serde(rename = "C")]
    pub channels: usize,
    pub patch_size: usize,
    #[serde(default)]
    pub layer_norm: LayerNormTap,
}

impl StoreHeader {
    pub fn from_info(info: &BackendInfo) -> Self {
        Self {
            model_id: info.model_id.clone(),
            facet: info.facet,
            c: info.joint_dim,
            channels: info.feature_dim,
            patch_size: info.patch_size,
            layer_norm: info.layer_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    /// Raster digest (see [`raster_digest`]), when the record came from pixels.
    pub digest: Option<String>,
    pub embedding: EmbeddingVector,
    pub patches: PatchFeatureGrid,
}

/// Immutable-after-load collection of image and prompt embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    header: StoreHeader,
    images: Vec<ImageRecord>,
    image_index: BTreeMap<String, usize>,
    digest_index: BTreeMap<String, usize>,
    texts: Vec<(String, EmbeddingVector)>,
    text_index: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Counts {
    images: usize,
    texts: usize,
}

#[derive(Serialize, Deserialize)]
struct ImageMeta {
    id: String,
    grid_h: usize,
    grid_w: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    digest: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    #[serde(flatten)]
    header: StoreHeader,
    dtype: String,
    counts: Counts,
    images: Vec<ImageMeta>,
    texts: Vec<String>,
    tensors: Vec<TensorMeta>,
}

impl EmbeddingStore {
    pub fn new(header: StoreHeader) -> Self {
        Self {
            header,
            images: Vec::new(),
            image_index: BTreeMap::new(),
            digest_index: BTreeMap::new(),
            texts: Vec::new(),
            text_index: BTreeMap::new(),
        }
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn texts(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.texts.iter().map(|(p, v)| (p.as_str(), v))
    }

    pub fn num_texts(&self) -> usize {
        self.texts.len()
    }

    /// Adds or replaces an image record. Dimensions must agree with the header.
    pub fn insert_image(&mut self, record: ImageRecord) -> Result<()> {
        self.check_joint(&record.embedding)?;
        if record.patches.channels() != self.header.channels {
            return Err(Error::DimensionMismatch {
                what: "patch channels",
                expected: self.header.channels,
                found: record.patches.channels(),
            });
        }
        if record.patches.patch_size() != self.header.patch_size {
            return Err(Error::DimensionMismatch {
                what: "patch size",
                expected: self.header.patch_size,
                found: record.patches.patch_size(),
            });
        }
        if record.id.is_empty() {
            return Err(Error::InvalidInput("image id must be non-empty".into()));
        }
        if let Some(&i) = self.image_index.get(&record.id) {
            if let Some(old) = self.images[i].digest.take() {
                self.digest_index.remove(&old);
            }
            if let Some(d) = &record.digest {
                self.digest_index.insert(d.clone(), i);
            }
            self.images[i] = record;
        } else {
            let i = self.images.len();
            self.image_index.insert(record.id.clone(), i);
            if let Some(d) = &record.digest {
                self.digest_index.insert(d.clone(), i);
            }
            self.images.push(record);
        }
        Ok(())
    }

    /// Adds or replaces a prompt embedding.
    pub fn insert_text(&mut self, prompt: impl Into<String>, vector: EmbeddingVector) -> Result<()> {
        self.check_joint(&vector)?;
        let prompt = prompt.into();
        if let Some(&i) = self.text_index.get(&prompt) {
            self.texts[i].1 = vector;
        } else {
            self.text_index.insert(prompt.clone(), self.texts.len());
            self.texts.push((prompt, vector));
        }
        Ok(())
    }

    fn check_joint(&self, v: &EmbeddingVector) -> Result<()> {
        if v.dim() != self.header.c {
            return Err(Error::DimensionMismatch {
                what: "joint embedding",
                expected: self.header.c,
                found: v.dim(),
            });
        }
        Ok(())
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.image_index.get(id).map(|&i| &self.images[i])
    }

    pub fn image_by_digest(&self, digest: &str) -> Option<&ImageRecord> {
        self.digest_index.get(digest).map(|&i| &self.images[i])
    }

    pub fn text(&self, prompt: &str) -> Option<&EmbeddingVector> {
        self.text_index.get(prompt).map(|&i| &self.texts[i].1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.images.len() * 2 + 1);
        let mut images = Vec::with_capacity(self.images.len());
        for rec in &self.images {
            images.push(ImageMeta {
                id: rec.id.clone(),
                grid_h: rec.patches.grid_h(),
                grid_w: rec.patches.grid_w(),
                digest: rec.digest.clone(),
            });
            tensors.push(TensorMeta {
                name: format!("image/{}/joint", rec.id),
                rows: 1,
                cols: self.header.c,
            });
            tensors.push(TensorMeta {
                name: format!("image/{}/patches", rec.id),
                rows: rec.patches.num_patches(),
                cols: self.header.channels,
            });
        }
        tensors.push(TensorMeta {
            name: "text/joint".into(),
            rows: self.texts.len(),
            cols: self.header.c,
        });
        let file_header = FileHeader {
            header: self.header.clone(),
            dtype: DTYPE.into(),
            counts: Counts {
                images: self.images.len(),
                texts: self.texts.len(),
            },
            images,
            texts: self.texts.iter().map(|(p, _)| p.clone()).collect(),
            tensors,
        };
        let json = serde_json::to_vec(&file_header)?;
        let header_len = u32::try_from(json.len())
            .map_err(|_| Error::Format("header larger than 4 GiB".into()))?;

        let payload_floats: usize = self
            .images
            .iter()
            .map(|r| self.header.c + r.patches.as_slice().len())
            .sum::<usize>()
            + self.texts.len() * self.header.c;
        let mut out = Vec::with_capacity(12 + json.len() + payload_floats * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        let mut push = |vals: &[f32]| {
            for v in vals {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        };
        for rec in &self.images {
            push(rec.embedding.values());
            push(rec.patches.as_slice());
        }
        for (_, v) in &self.texts {
            push(v.values());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        // A cut-off prefix of the magic is a truncated file, not a foreign one.
        if bytes.len() < 8 && MAGIC.starts_with(bytes) {
            return Err(Error::Truncated {
                expected: 12,
                found: bytes.len(),
            });
        }
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic bytes, expected CLIPEMB1".into()));
        }
        if bytes.len() < 12 {
            return Err(Error::Truncated {
                expected: 12,
                found: bytes.len(),
            });
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12 + header_len;
        if bytes.len() < header_end {
            return Err(Error::Truncated {
                expected: header_end,
                found: bytes.len(),
            });
        }
        let file_header: FileHeader = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
        if file_header.dtype != DTYPE {
            return Err(Error::Format(format!(
                "unsupported dtype {:?}",
                file_header.dtype
            )));
        }
        let header = file_header.header;
        if file_header.counts.images != file_header.images.len()
            || file_header.counts.texts != file_header.texts.len()
        {
            return Err(Error::Format("header counts disagree with metadata".into()));
        }

        // The tensor list must be exactly the one implied by the metadata.
        let mut expected = Vec::with_capacity(file_header.images.len() * 2 + 1);
        for m in &file_header.images {
            expected.push((format!("image/{}/joint", m.id), 1, header.c));
            expected.push((
                format!("image/{}/patches", m.id),
                m.grid_h * m.grid_w,
                header.channels,
            ));
        }
        expected.push(("text/joint".to_string(), file_header.texts.len(), header.c));
        if expected.len() != file_header.tensors.len()
            || expected
                .iter()
                .zip(&file_header.tensors)
                .any(|((n, r, c), t)| *n != t.name || *r != t.rows || *c != t.cols)
        {
            return Err(Error::Format(
                "tensor list does not match header dims".into(),
            ));
        }

        let payload = &bytes[header_end..];
        let total_floats: usize = file_header.tensors.iter().map(|t| t.rows * t.cols).sum();
        if payload.len() != total_floats * 4 {
            return Err(Error::Truncated {
                expected: total_floats * 4,
                found: payload.len(),
            });
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|b| f32::from_bits(u32::from_le_bytes(b.try_into().unwrap())));
        let mut take = |n: usize| -> Vec<f32> { floats.by_ref().take(n).collect() };

        let mut store = EmbeddingStore::new(header.clone());
        for m in file_header.images {
            let joint = EmbeddingVector::from_raw(take(header.c));
            let patches = PatchFeatureGrid::new(
                take(m.grid_h * m.grid_w * header.channels),
                header.channels,
                m.grid_h,
                m.grid_w,
                header.patch_size,
                header.facet,
            )?;
            if store.image_index.contains_key(&m.id) {
                return Err(Error::Format(format!("duplicate image id {:?}", m.id)));
            }
            store.insert_image(ImageRecord {
                id: m.id,
                digest: m.digest,
                embedding: joint,
                patches,
            })?;
        }
        for prompt in file_header.texts {
            if store.text_index.contains_key(&prompt) {
                return Err(Error::Format(format!("duplicate prompt {prompt:?}")));
            }
            let v = EmbeddingVector::from_raw(take(header.c));
            store.insert_text(prompt, v)?;
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(Error::at(path))?;
        Self::from_bytes(&bytes)
    }

    /// Writes through a temporary sibling and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::report::write_atomic(path.as_ref(), &self.to_bytes()?)
    }
}

/// SHA-256 over width, height (u32 LE) and the raw RGB bytes.
pub fn raster_digest(image: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    hex::encode(h.finalize())
}

/// Serves embeddings from a loaded store. Rasters are matched by digest;
/// anything not in the store is reported as backend-unavailable.
#[derive(Debug, Clone)]
pub struct StoreBackend {
    store: EmbeddingStore,
    info: BackendInfo,
}

impl StoreBackend {
    pub fn new(store: EmbeddingStore, input_size: u32) -> Self {
        let h = store.header();
        let info = BackendInfo {
            model_id: h.model_id.clone(),
            facet: h.facet,
            joint_dim: h.c,
            feature_dim: h.channels,
            patch_size: h.patch_size,
            input_size,
            layer_norm: h.layer_norm,
        };
        Self { store, info }
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    /// Lookup by image id rather than by pixels.
    pub fn encode_image_id(&self, id: &str) -> Result<(EmbeddingVector, PatchFeatureGrid)> {
        self.store
            .image(id)
            .map(|r| (r.embedding.clone(), r.patches.clone()))
            .ok_or_else(|| Error::BackendUnavailable(format!("image {id:?} is not in the store")))
    }
}

impl EncoderBackend for StoreBackend {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn encode_image(&self, image: &RgbImage) -> Result<(EmbeddingVector, PatchFeatureGrid)> {
        let digest = raster_digest(image);
        self.store
            .image_by_digest(&digest)
            .map(|r| (r.embedding.clone(), r.patches.clone()))
            .ok_or_else(|| {
                Error::BackendUnavailable(format!("raster {} is not in the store", &digest[..12]))
            })
    }

    fn encode_texts(&self, prompts: &[String]) -> Result<Vec<EmbeddingVector>> {
        prompts
            .iter()
            .map(|p| {
                self.store.text(p).cloned().ok_or_else(|| {
                    Error::BackendUnavailable(format!("prompt {p:?} is not in the store"))
                })
            })
            .collect()
    }
}

/// Backend that answers from a store first and falls back to a live encoder.
pub struct CachedBackend<B> {
    store: StoreBackend,
    inner: B,
}

impl<B: EncoderBackend> CachedBackend<B> {
    pub fn new(store: EmbeddingStore, inner: B) -> Result<Self> {
        let info = inner.info();
        let h = store.header();
        if h.c != info.joint_dim {
            return Err(Error::DimensionMismatch {
                what: "joint embedding",
                expected: info.joint_dim,
                found: h.c,
            });
        }
        if h.channels != info.feature_dim {
            return Err(Error::DimensionMismatch {
                what: "patch channels",
                expected: info.feature_dim,
                found: h.channels,
            });
        }
        let input = info.input_size;
        Ok(Self {
            store: StoreBackend::new(store, input),
            inner,
        })
    }
}

impl<B: EncoderBackend> EncoderBackend for CachedBackend<B> {
    fn info(&self) -> &BackendInfo {
        self.inner.info()
    }

    fn encode_image(&self, image: &RgbImage) -> Result<(EmbeddingVector, PatchFeatureGrid)> {
        match self.store.encode_image(image) {
            Ok(hit) => Ok(hit),
            Err(Error::BackendUnavailable(_)) => self.inner.encode_image(image),
            Err(e) => Err(e),
        }
    }

    fn encode_texts(&self, prompts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(prompts.len());
        let mut missing = Vec::new();
        for (i, p) in prompts.iter().enumerate() {
            match self.store.store().text(p) {
                Some(v) => out.push(Some(v.clone())),
                None => {
                    out.push(None);
                    missing.push(i);
                }
            }
        }
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| prompts[i].clone()).collect();
            for (i, v) in missing.into_iter().zip(self.inner.encode_texts(&batch)?) {
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled above")).collect())
    }
}

/// Encodes `images` (id, raster) and `prompts` with `backend` into a new store.
pub fn extract_store<B: EncoderBackend + ?Sized>(
    backend: &B,
    images: &[(String, RgbImage)],
    prompts: &[String],
) -> Result<EmbeddingStore> {
    let info = backend.info();
    let mut store = EmbeddingStore::new(StoreHeader::from_info(info));
    let encoded: Vec<Result<(EmbeddingVector, PatchFeatureGrid)>> = {
        use rayon::prelude::*;
        images
            .par_iter()
            .map(|(_, img)| {
                let img = crate::embedding::resize_to_input(img, info)?;
                backend.encode_image(&img)
            })
            .collect()
    };
    for ((id, img), enc) in images.iter().zip(encoded) {
        let (embedding, patches) = enc?;
        let img = crate::embedding::resize_to_input(img, info)?;
        store.insert_image(ImageRecord {
            id: id.clone(),
            digest: Some(raster_digest(&img)),
            embedding,
            patches,
        })?;
    }
    let mut unique: Vec<String> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for p in prompts {
        if seen.insert(p.as_str()) {
            unique.push(p.clone());
        }
    }
    if !unique.is_empty() {
        for (p, v) in unique.iter().zip(backend.encode_texts(&unique)?) {
            store.insert_text(p.clone(), v)?;
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> StoreHeader {
        StoreHeader {
            model_id: "test".into(),
            facet: Facet::Keys,
            c: 3,
            channels: 2,
            patch_size: 4,
            layer_norm: LayerNormTap::Post,
        }
    }

    fn sample() -> EmbeddingStore {
        let mut s = EmbeddingStore::new(header());
        s.insert_image(ImageRecord {
            id: "img_000".into(),
            digest: Some("abc".into()),
            embedding: EmbeddingVector::from_raw(vec![1.0, 0.0, 0.0]),
            patches: PatchFeatureGrid::new(vec![0.5; 8], 2, 2, 2, 4, Facet::Keys).unwrap(),
        })
        .unwrap();
        s.insert_text("a photo of a dog", EmbeddingVector::from_raw(vec![0.0, 1.0, 0.0]))
            .unwrap();
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = sample();
        let bytes = s.to_bytes().unwrap();
        let back = EmbeddingStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back, s);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(EmbeddingStore::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn short_payload_is_truncation() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            EmbeddingStore::from_bytes(&bytes),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn header_dims_are_enforced() {
        let mut s = EmbeddingStore::new(header());
        let err = s
            .insert_text("x", EmbeddingVector::from_raw(vec![1.0, 0.0]))
            .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn store_backend_misses_are_unavailable() {
        let b = StoreBackend::new(sample(), 8);
        assert!(b.encode_image_id("img_000").is_ok());
        assert!(matches!(
            b.encode_image_id("nope"),
            Err(Error::BackendUnavailable(_))
        ));
        assert!(matches!(
            b.encode_texts(&["unknown".into()]),
            Err(Error::BackendUnavailable(_))
        ));
    }
}
