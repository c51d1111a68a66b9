//! Semantic segmentation of corrosion in inspection imagery with a compact
//! U-Net trained on CPU.
//!
//! The crate covers the tensor kernels and their gradients, the network and
//! its checkpoint format, class-imbalance-aware losses, target-class
//! metrics, a synthetic scene generator with preprocessing and
//! augmentation, and an Adam training loop with Dice-based early stopping.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
