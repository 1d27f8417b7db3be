//! Dual-stream vision transformer for paired colour / infrared fundus grading,
//! with cross-modal attention fusion, a reverse-mode autodiff engine, a
//! synthetic paired-image generator and training/evaluation tooling.

pub mod cfa;
pub mod config;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod parallel;
pub mod param;
pub mod rollout;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use model::{Cft, LossSetup, ModelConfig};
pub use tensor::{Float, Precision, Tensor};
