//! U-Net and mU-Net segmentation on a small reverse-mode autodiff engine.
//!
//! The mU-Net variant adds, at every pooled stage, a residual path
//! (stride-2 transposed convolution + PReLU applied to the pooled features)
//! whose output is subtracted from the encoder features before they enter
//! an extra convolution in the skip connection.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod network;
pub mod params;
pub mod tensor;
pub mod training;

pub use autodiff::{BnMode, BnState, Fault, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use kernels::Padding;
pub use params::{ParamId, ParamStore, Parameter, Role};
pub use tensor::Tensor;
