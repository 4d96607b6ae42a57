//! Lightweight crowd counting: a depthwise-separable backbone, an
//! adjacent-scale fusion head, geometry-adaptive ground truth, training with
//! reverse-mode autodiff, evaluation, cost accounting and magnitude pruning.

pub mod ablation;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod conv;
pub mod cost;
pub mod dataset;
pub mod density;
pub mod error;
pub mod format;
pub mod fusion;
pub mod init;
pub mod metrics;
pub mod network;
pub mod params;
pub mod prune;
pub mod resize;
pub mod synth;
pub mod tensor;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
pub use network::NetworkConfig;
pub use params::Params;
pub use tensor::Tensor;
