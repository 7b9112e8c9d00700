//! Toy sparse mixture-of-experts transformer with gradient-free expert
//! pruning and merging.
//!
//! A compressed model keeps `E'` experts per layer. Each layer group shares a
//! router-mapping matrix (how original gate weights are redistributed onto
//! retained experts) and an expert-merging matrix (how retained expert weights
//! are built from the originals). [`evolution::search`] finds those matrices
//! with a two-phase evolutionary search: first over discrete pruning choices,
//! then over continuous merging coefficients starting from the best pruning.

pub mod baselines;
pub mod cli;
pub mod compression;
pub mod error;
pub mod evaluation;
pub mod evolution;
pub mod model;
pub mod profiler;
pub mod rng;
pub mod tensor;

pub use compression::{apply_genome, Genome, GroupAssignment, Phase};
pub use error::{Error, Result};
pub use evaluation::{fitness, make_task, Task, TaskKind};
pub use evolution::{search, SearchConfig, SearchInit, SearchOutcome};
pub use model::{ModelConfig, SMoEModel};
pub use tensor::Matrix;
