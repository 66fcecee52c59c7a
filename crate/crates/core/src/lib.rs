//! Dual-view video snapshot compressive imaging.

pub mod amplifier;
pub mod container;
pub mod config;
pub mod error;
pub mod eval;
pub mod flow;
pub mod model;
pub mod nn;
pub mod refine;
pub mod sensing;
pub mod separator;
pub mod solvers;
pub mod train;

pub use error::{Error, Result};
pub use config::PipelineConfig;
pub use eval::{EvalReport, Reconstructor};
pub use model::{ModelConfig, OfaNet, PipelineMode};
pub use refine::Ablation;
pub use sensing::{MaskSet, Measurement, VideoCube, ViewId};
pub use solvers::GapTvConfig;
pub use train::{TrainConfig, TrainPair};
