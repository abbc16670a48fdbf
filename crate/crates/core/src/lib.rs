//! Dense-residual-connected Swin transformer (DRCT) for single-image
//! super-resolution, with its progressive training schedule, benchmark
//! metrics and feature-intensity diagnostics.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod nn;
pub mod train;

pub use candle_core::{DType, Device};
pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use diagnostics::{g_index, record_trace, IntensityTrace, TapLevel};
pub use error::{Error, Result};
pub use image::{ImageTensor, ValueRange};
pub use model::{build_model, Network};
pub use train::{StagePlan, TrainState};
