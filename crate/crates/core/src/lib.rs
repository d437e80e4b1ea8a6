//! Building blocks for a two-branch re-identification network with
//! second-order non-local attention: a small `f64` autodiff engine, the
//! neural primitives on top of it, covariance-based spatial attention,
//! rectangular DropBlock regularization, metric-learning losses, model
//! assembly with checkpointing, and the standard CMC/mAP ranking protocol.

pub mod dropblock;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod sona;
pub mod suite;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{grad_check, Tape, Tensor};
