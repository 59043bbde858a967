//! Variational information distillation.
//!
//! A student network is trained under its task loss plus, for each selected
//! (teacher layer, student layer) pair, the negative log-likelihood of the
//! teacher activation under a Gaussian whose mean is regressed from the
//! student activation. Minimizing that likelihood term maximizes a variational
//! lower bound on the mutual information between the two layers.

pub mod data;
pub mod error;
pub mod evalviz;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
