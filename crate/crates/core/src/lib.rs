//! Adversarial training workbench for aspect-based sentiment analysis.

pub mod adversarial;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tape;
pub mod task;
pub mod tensor;
pub mod tokenizer;

pub use error::{BatError, Result};
pub use params::{AdamConfig, ParamSet, ParamView};
pub use tape::{Tape, Var};
pub use task::Task;
pub use tensor::{Real, Tensor};
