//! Stacked-hourglass pose estimation with pluggable residual blocks.

pub mod blocks;
pub mod cli;
pub mod complexity;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod hourglass;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod presets;
pub mod tensor;
pub mod train;

pub use error::{HgError, Result};
