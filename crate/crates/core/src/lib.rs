//! Volumetric segmentation network combining bidirectional state-space scans,
//! Kolmogorov–Arnold nonlinear operators, hierarchical depthwise attention and
//! multi-scale self-distillation, all on a small CPU autodiff tensor core.

pub mod bench;
pub mod bkm;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod hsa;
pub mod kan;
pub mod losses;
pub mod mda;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{no_grad, trace_branches, Tensor};
