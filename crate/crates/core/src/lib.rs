//! Efficient diffusion transformer with attention modulation and in-network
//! token masking, built on a small autodiff tensor core.

pub mod amm;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod flops;
pub mod harness;
pub mod masking;
pub mod model;
pub mod optim;

pub use edt_tensor as tensor;
pub use config::ModelConfig;
pub use error::{EdtError, Result};
pub use model::Edt;
