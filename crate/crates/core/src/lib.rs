//! Toy single-shot detector with a weakly supervised segmentation branch
//! that re-weights low-level features, and channel-wise global activation
//! gates on higher source layers.

pub mod ablate;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod global_activation;
pub mod grad_suite;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod nn;
pub mod raster;
pub mod seg_branch;
pub mod ssd;
pub mod tensor;
pub mod train;

pub use error::{DesError, Result};
pub use tensor::Tensor;
