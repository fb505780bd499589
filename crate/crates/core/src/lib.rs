//! Split fine-tuning of a small transformer between a client and a server,
//! with activation decorrelation, an outlier-preserving wire codec and a
//! reconstruction-attack harness.

pub mod attack;
pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod decorrelation;
pub mod experiment;
pub mod model;
pub mod optim;
pub mod protocol;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use tensor::{Tensor, TensorError};
