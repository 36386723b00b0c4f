//! Heatmap targets, synthetic pose data, annotation files and checkpoints.

pub mod annotations;
pub mod checkpoint;
pub mod synthetic;
pub mod target;

pub use annotations::{load_annotations, parse_annotations, write_annotations, Annotation};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use synthetic::{generate_synthetic_dataset, PoseSample};
pub use target::make_gaussian_target;
