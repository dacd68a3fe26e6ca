//! Multi-stream video encoder with iterative video-text co-tokenization for
//! video question answering.

pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod cotokenizer;
pub mod decoder;
pub mod error;
pub mod experiment;
pub mod flops;
pub mod fusion;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use config::{preset, FusionMode, ModelConfig, SoftmaxAxis, StreamSpec, ValidatedConfig};
pub use error::{Error, Result};
pub use model::{Model, Objective, Sample, Target};
pub use params::ParamStore;
