//! Layer graphs with named tap points.

mod builders;
mod checkpoint;
mod network;

pub use builders::{build_cnn, build_mlp, build_mlp_with_dropout, DEFAULT_DROPOUT};
pub use checkpoint::{Checkpoint, Dtype, CHECKPOINT_FORMAT_VERSION};
pub use network::{Forward, LayerSpec, Mode, Network, TapActivations};

/// Momentum of batch-norm running averages.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
