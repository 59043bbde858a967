use super::{LayerSpec, Network};
use crate::error::{Error, Result};

/// Drop rate between hidden MLP stages.
pub const DEFAULT_DROPOUT: f64 = 0.2;

/// Student MLP: one linear layer, three bottleneck linear layers and a
/// classifier, with dropout, batch-norm and ReLU after each hidden stage.
///
/// Taps: `hidden1`..`hidden4` after each hidden activation, plus
/// `penultimate` (the classifier input, same position as `hidden4`).
pub fn build_mlp(input_shape: &[usize], hidden: usize, num_classes: usize) -> Result<Network> {
    build_mlp_with_dropout(input_shape, hidden, num_classes, DEFAULT_DROPOUT)
}

pub fn build_mlp_with_dropout(input_shape: &[usize], hidden: usize, num_classes: usize, dropout: f64) -> Result<Network> {
    if hidden == 0 || hidden % 4 != 0 {
        return Err(Error::InvalidArgument(format!("hidden width {hidden} must be a positive multiple of 4")));
    }
    if num_classes == 0 || input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::InvalidArgument("dimensions must be positive".into()));
    }
    let mut specs = Vec::new();
    if input_shape.len() > 1 {
        specs.push(LayerSpec::Flatten);
    }
    for stage in 1..=4 {
        specs.push(if stage == 1 {
            LayerSpec::Linear { out_features: hidden }
        } else {
            LayerSpec::BottleneckLinear { width: hidden }
        });
        specs.push(LayerSpec::Dropout { rate: dropout });
        specs.push(LayerSpec::BatchNorm);
        specs.push(LayerSpec::Relu);
        specs.push(LayerSpec::Tap { name: format!("hidden{stage}") });
    }
    specs.push(LayerSpec::Tap { name: "penultimate".into() });
    specs.push(LayerSpec::Linear { out_features: num_classes });
    Network::new(input_shape, specs)
}

/// Teacher CNN in pre-activation order: each group is a 3x3 conv, and every
/// group after the first opens with batch-norm, ReLU and 2x2 max pooling.
/// A final batch-norm and ReLU precede global average pooling and the
/// linear head.
///
/// Taps: `group1`..`groupN` at the end of each group (the raw conv output),
/// `penultimate` after pooling and `logits` at the output.
pub fn build_cnn(channels_per_group: &[usize], num_classes: usize, input_shape: &[usize]) -> Result<Network> {
    if channels_per_group.is_empty() || channels_per_group.contains(&0) {
        return Err(Error::InvalidArgument("at least one non-empty conv group is required".into()));
    }
    if input_shape.len() != 3 {
        return Err(Error::shape("build_cnn", format!("input must be [C, H, W], got {input_shape:?}")));
    }
    let mut specs = Vec::new();
    for (g, &ch) in channels_per_group.iter().enumerate() {
        if g > 0 {
            specs.push(LayerSpec::BatchNorm);
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::MaxPool { kernel: 2, stride: 2 });
        }
        specs.push(LayerSpec::Conv { out_channels: ch, kernel: 3, stride: 1, padding: 1 });
        specs.push(LayerSpec::Tap { name: format!("group{}", g + 1) });
    }
    specs.push(LayerSpec::BatchNorm);
    specs.push(LayerSpec::Relu);
    specs.push(LayerSpec::GlobalAvgPool);
    specs.push(LayerSpec::Tap { name: "penultimate".into() });
    specs.push(LayerSpec::Linear { out_features: num_classes });
    specs.push(LayerSpec::Tap { name: "logits".into() });
    Network::new(input_shape, specs)
}
