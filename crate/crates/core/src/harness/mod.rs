//! Operational surface: synthetic data, training, sampling, evaluation and
//! on-disk formats.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod image;
pub mod sample;
pub mod train;

pub use data::{DatasetSpec, SyntheticDataset};
pub use eval::{evaluate, mmd, EvalReport};
pub use sample::{generate, SampleOptions};
pub use train::{load_model, RunConfig, Strategy, Trainer};
