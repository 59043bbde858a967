//! Variational transfer between teacher and student layers.
//!
//! For each selected pair `(t, s)` the student side is regressed onto the
//! teacher activation through a Gaussian `q(t | s)` with a learned mean
//! network and one learned variance per channel (image activations) or per
//! dimension (vector activations). The transfer term is the negative
//! log-likelihood of `t` under `q`, normalized by the activation size.

mod gaussian;
mod losses;
mod objective;
mod regressor;

pub use gaussian::{gaussian_nll, Layout, QPass, VariationalGaussian, DEFAULT_EPSILON, INIT_VARIANCE};
pub use losses::{cross_entropy, kd_loss, mse_match_loss};
pub use objective::{vid_loss, KdTerm, LossReport, MsePair, TransferObjective, TransferPair, VidLoss};
pub use regressor::{build_regressor, RegressorKind};
