//! Single-shot temporal action detection with decoupled classification and
//! localization refinement branches.

pub mod ablation;
pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod infer;
pub mod io;
pub mod losses;
pub mod network;
pub mod parallel;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use config::{Mode, RunConfig};
pub use error::{Error, Result};
pub use tensor::Tensor;
