//! Run configuration and backend selection.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::concepts::{ConceptMethod, ConceptOptions};
use crate::embedding::{EncoderBackend, Facet};
use crate::error::{Error, Result};
use crate::grounding::SinkhornOptions;
use crate::store::{CachedBackend, EmbeddingStore, StoreBackend};
use crate::synthetic::{SyntheticConfig, SyntheticEncoder};

/// Environment variable that overrides the model path.
pub const MODEL_ENV: &str = "CLIPMI_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Encoder description. `.json` files describe the analytic encoder;
    /// `.onnx` graphs need a build with ONNX support.
    pub model: Option<PathBuf>,
    /// CLIPEMB1 store consulted before the model.
    pub store: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub descriptors: Option<PathBuf>,
    pub output: PathBuf,
    pub facet: Facet,
    /// Model input resolution, used when serving from a store alone.
    pub input_size: u32,
    pub method: ConceptMethod,
    /// Number of visual concepts.
    pub l: usize,
    /// Candidate cap per concept after the median filter.
    pub k: usize,
    /// Sinkhorn temperature.
    pub tau: f64,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,
    /// Language-side retrieval size.
    pub u: usize,
    /// Descriptors kept per concept.
    pub top_n: usize,
    pub normalize_features: bool,
    /// Zero-shot template set: imagenet, places365 or food101.
    pub templates: String,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            store: None,
            dataset: None,
            descriptors: None,
            output: PathBuf::from("out"),
            facet: Facet::Tokens,
            input_size: 224,
            method: ConceptMethod::Kmeans,
            l: 5,
            k: 500,
            tau: 1.0,
            sinkhorn_max_iters: 1000,
            sinkhorn_tol: 1e-6,
            u: 50,
            top_n: 3,
            normalize_features: true,
            templates: "imagenet".into(),
            seed: 0,
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(Error::at(path))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 {
            return Err(Error::Config("l must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("tau must be a positive number".into()));
        }
        if self.u == 0 {
            return Err(Error::Config("u must be at least 1".into()));
        }
        if self.top_n == 0 {
            return Err(Error::Config("top_n must be at least 1".into()));
        }
        if crate::descriptors::templates_for(&self.templates).is_none() {
            return Err(Error::Config(format!("unknown template set {:?}", self.templates)));
        }
        Ok(())
    }

    pub fn concept_options(&self) -> ConceptOptions {
        ConceptOptions {
            method: self.method,
            l: self.l,
            seed: self.seed,
            normalize: self.normalize_features,
        }
    }

    pub fn sinkhorn_options(&self) -> SinkhornOptions {
        SinkhornOptions {
            tau: self.tau,
            max_iters: self.sinkhorn_max_iters,
            tol: self.sinkhorn_tol,
        }
    }

    pub fn templates(&self) -> Result<&'static [&'static str]> {
        crate::descriptors::templates_for(&self.templates)
            .ok_or_else(|| Error::Config(format!("unknown template set {:?}", self.templates)))
    }

    pub fn require_dataset(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::Config("a dataset directory is required".into()))
    }

    pub fn require_descriptors(&self) -> Result<&Path> {
        self.descriptors
            .as_deref()
            .ok_or_else(|| Error::Config("a descriptor file is required".into()))
    }

    pub fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }
}

fn open_model(path: &Path, facet: Facet) -> Result<Box<dyn EncoderBackend>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            let bytes = fs::read(path).map_err(Error::at(path))?;
            let mut cfg: SyntheticConfig = serde_json::from_slice(&bytes)?;
            cfg.facet = facet;
            Ok(Box::new(SyntheticEncoder::new(cfg)?))
        }
        Some("onnx") => Err(Error::BackendUnavailable(format!(
            "{}: ONNX inference is not available in this build",
            path.display()
        ))),
        _ => Err(Error::Config(format!(
            "{}: unrecognised model file (expected .json or .onnx)",
            path.display()
        ))),
    }
}

/// Backend for a run: the store alone, the model alone, or the store in
/// front of the model.
pub fn open_backend(config: &RunConfig) -> Result<Box<dyn EncoderBackend>> {
    let store = match &config.store {
        Some(p) => {
            let s = EmbeddingStore::load(p)?;
            if s.header().facet != config.facet {
                return Err(Error::Config(format!(
                    "store facet is {} but the run asks for {}",
                    s.header().facet,
                    config.facet
                )));
            }
            Some(s)
        }
        None => None,
    };
    match (store, &config.model) {
        (Some(s), Some(m)) => Ok(Box::new(CachedBackend::new(s, open_model(m, config.facet)?)?)),
        (Some(s), None) => Ok(Box::new(StoreBackend::new(s, config.input_size))),
        (None, Some(m)) => open_model(m, config.facet),
        (None, None) => Err(Error::Config(format!(
            "no model or store configured (set --model, --store or {MODEL_ENV})"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_constants() {
        let c = RunConfig::default();
        assert_eq!((c.l, c.k, c.tau, c.top_n, c.u), (5, 500, 1.0, 3, 50));
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults_and_rejects_unknown_keys() {
        let c: RunConfig = serde_json::from_str(r#"{"l": 3, "seed": 9}"#).unwrap();
        assert_eq!(c.l, 3);
        assert_eq!(c.k, 500);
        assert!(serde_json::from_str::<RunConfig>(r#"{"lambda": 1}"#).is_err());
    }

    #[test]
    fn onnx_models_are_unavailable() {
        let c = RunConfig {
            model: Some("model.onnx".into()),
            ..RunConfig::default()
        };
        assert!(matches!(open_backend(&c), Err(Error::BackendUnavailable(_))));
        assert!(matches!(open_backend(&RunConfig::default()), Err(Error::Config(_))));
    }
}
