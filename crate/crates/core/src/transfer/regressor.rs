use serde::{Deserialize, Serialize};

use super::gaussian::{Layout, VariationalGaussian, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network};

/// Mean-network families for `q(t | s)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorKind {
    /// Three 1x1 convolutions, hidden width twice the teacher channels.
    Conv3Wide,
    /// Two 1x1 convolutions, hidden width half the teacher channels.
    Conv2Narrow,
    /// A single linear map onto a vector target (logits).
    LinearLogit,
    /// A vector treated as a `[N, 1, 1]` map, upsampled by a 4x4/stride-1
    /// transposed convolution and then 4x4/stride-2/pad-1 transposed
    /// convolutions until the teacher's spatial size is reached.
    DeconvStack,
}

fn conv1x1(out_channels: usize) -> LayerSpec {
    LayerSpec::Conv { out_channels, kernel: 1, stride: 1, padding: 0 }
}

/// Mean-network layer list for `kind`, mapping `student_shape` onto
/// `teacher_shape` (both per-sample).
pub fn regressor_specs(kind: RegressorKind, student_shape: &[usize], teacher_shape: &[usize]) -> Result<(Vec<LayerSpec>, Layout)> {
    let mismatch = || {
        Error::shape(
            "build_regressor",
            format!("{kind:?} cannot map {student_shape:?} onto {teacher_shape:?}"),
        )
    };
    match kind {
        RegressorKind::Conv3Wide | RegressorKind::Conv2Narrow => {
            let (&[_, sh, sw], &[tc, th, tw]) = (student_shape, teacher_shape) else {
                return Err(mismatch());
            };
            if (sh, sw) != (th, tw) {
                return Err(mismatch());
            }
            let specs = if kind == RegressorKind::Conv3Wide {
                let hidden = 2 * tc;
                vec![
                    conv1x1(hidden),
                    LayerSpec::BatchNorm,
                    LayerSpec::Relu,
                    conv1x1(hidden),
                    LayerSpec::BatchNorm,
                    LayerSpec::Relu,
                    conv1x1(tc),
                ]
            } else {
                let hidden = (tc / 2).max(1);
                vec![conv1x1(hidden), LayerSpec::BatchNorm, LayerSpec::Relu, conv1x1(tc)]
            };
            Ok((specs, Layout::Conv))
        }
        RegressorKind::LinearLogit => {
            let (&[_], &[n]) = (student_shape, teacher_shape) else {
                return Err(mismatch());
            };
            Ok((vec![LayerSpec::Linear { out_features: n }], Layout::Vector))
        }
        RegressorKind::DeconvStack => {
            let (&[_], &[tc, th, tw]) = (student_shape, teacher_shape) else {
                return Err(mismatch());
            };
            let doublings = match (th, tw) {
                (h, w) if h == w && h >= 4 && h % 4 == 0 && (h / 4).is_power_of_two() => (h / 4).trailing_zeros(),
                _ => {
                    return Err(Error::shape(
                        "build_regressor",
                        format!("spatial size {th}x{tw} is not reachable from 1x1 (needs 4 * 2^m)"),
                    ))
                }
            };
            let mut specs = vec![
                LayerSpec::Unflatten,
                LayerSpec::TransposedConv { out_channels: tc, kernel: 4, stride: 1, padding: 0 },
            ];
            for _ in 0..doublings {
                specs.push(LayerSpec::TransposedConv { out_channels: tc, kernel: 4, stride: 2, padding: 1 });
            }
            Ok((specs, Layout::Conv))
        }
    }
}

/// Builds `q(t | s)` with an initialized mean network and all variances at
/// their initial value.
pub fn build_regressor(
    kind: RegressorKind,
    student_shape: &[usize],
    teacher_shape: &[usize],
    seed: u64,
) -> Result<VariationalGaussian> {
    let (specs, layout) = regressor_specs(kind, student_shape, teacher_shape)?;
    let net = Network::new(student_shape, specs)?;
    if net.output_shape() != teacher_shape {
        return Err(Error::shape(
            "build_regressor",
            format!("mean network produces {:?}, teacher tap is {teacher_shape:?}", net.output_shape()),
        ));
    }
    let mut q = VariationalGaussian::new(net, layout, DEFAULT_EPSILON)?;
    q.init(seed)?;
    Ok(q)
}
