pub mod boost;
pub mod cli;
pub mod concepts;
pub mod config;
pub mod dataset;
pub mod descriptors;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod flags;
pub mod grounding;
pub mod imaging;
pub mod language;
pub mod mi;
pub mod pipeline;
pub mod prompting;
pub mod report;
pub mod spectral;
pub mod store;
pub mod synthetic;
pub mod world;
