// `!(x > 0.0)`-style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod tensor;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use model::{MindCrossModel, ModelConfig};
pub use tensor::Tensor;
