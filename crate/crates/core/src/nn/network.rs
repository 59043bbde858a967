use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BN_EPS, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::kernels::{conv_out, conv_transpose_out};
use crate::tensor::{BatchNormStats, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One entry of a network description. Input extents are inferred from the
/// preceding layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear { out_features: usize },
    /// Two linear maps `h -> h/4 -> h` with no nonlinearity between them.
    BottleneckLinear { width: usize },
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    TransposedConv { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm,
    Relu,
    Dropout { rate: f64 },
    MaxPool { kernel: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    /// `[N] -> [N, 1, 1]`
    Unflatten,
    Tap { name: String },
}

#[derive(Clone, Debug)]
enum Layer {
    Linear { weight: Tensor, bias: Tensor },
    Bottleneck { down: Tensor, down_bias: Tensor, up: Tensor, up_bias: Tensor },
    Conv { weight: Tensor, bias: Tensor, stride: usize, padding: usize },
    TransposedConv { weight: Tensor, bias: Tensor, stride: usize, padding: usize },
    BatchNorm { gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor },
    Relu,
    Dropout { rate: f64 },
    MaxPool { kernel: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    Unflatten,
    Tap { name: String },
}

/// Activations captured at tap points during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct TapActivations(BTreeMap<String, Var>);

impl TapActivations {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.0.insert(name.into(), var);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.0.get(name).copied().ok_or_else(|| Error::MissingTap(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Result of [`Network::forward`]: the output, tap activations and the tape
/// variables bound to each trainable parameter.
#[derive(Debug)]
pub struct Forward {
    pub output: Var,
    pub taps: TapActivations,
    params: Vec<Var>,
    batch_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

/// Ordered layer stack with named tap points.
#[derive(Clone, Debug)]
pub struct Network {
    input_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    output_shape: Vec<usize>,
    tap_shapes: BTreeMap<String, Vec<usize>>,
    frozen: bool,
}

fn fan_in_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

impl Network {
    /// Builds a network with zero weights from a per-sample input shape and a
    /// layer list. Call [`Network::init_params`] before training.
    pub fn new(input_shape: &[usize], specs: Vec<LayerSpec>) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        let mut tap_shapes = BTreeMap::new();
        let err = |i: usize, detail: String| Error::shape("network", format!("layer {i}: {detail}"));
        for (i, spec) in specs.iter().enumerate() {
            let layer = match spec {
                LayerSpec::Linear { out_features } => {
                    let [n] = shape[..] else {
                        return Err(err(i, format!("linear expects a vector input, got {shape:?}")));
                    };
                    shape = vec![*out_features];
                    Layer::Linear { weight: Tensor::zeros(vec![n, *out_features]), bias: Tensor::zeros(vec![*out_features]) }
                }
                LayerSpec::BottleneckLinear { width } => {
                    if shape != [*width] {
                        return Err(err(i, format!("bottleneck of width {width} on input {shape:?}")));
                    }
                    if width % 4 != 0 || *width == 0 {
                        return Err(Error::InvalidArgument(format!("bottleneck width {width} is not a positive multiple of 4")));
                    }
                    let inner = width / 4;
                    Layer::Bottleneck {
                        down: Tensor::zeros(vec![*width, inner]),
                        down_bias: Tensor::zeros(vec![inner]),
                        up: Tensor::zeros(vec![inner, *width]),
                        up_bias: Tensor::zeros(vec![*width]),
                    }
                }
                LayerSpec::Conv { out_channels, kernel, stride, padding } => {
                    let [c, h, w] = shape[..] else {
                        return Err(err(i, format!("conv expects [C, H, W], got {shape:?}")));
                    };
                    let (Some(oh), Some(ow)) = (conv_out(h, *kernel, *stride, *padding), conv_out(w, *kernel, *stride, *padding)) else {
                        return Err(err(i, format!("{kernel}x{kernel} conv does not fit {h}x{w}")));
                    };
                    shape = vec![*out_channels, oh, ow];
                    Layer::Conv {
                        weight: Tensor::zeros(vec![*out_channels, c, *kernel, *kernel]),
                        bias: Tensor::zeros(vec![*out_channels]),
                        stride: *stride,
                        padding: *padding,
                    }
                }
                LayerSpec::TransposedConv { out_channels, kernel, stride, padding } => {
                    let [c, h, w] = shape[..] else {
                        return Err(err(i, format!("transposed conv expects [C, H, W], got {shape:?}")));
                    };
                    let (Some(oh), Some(ow)) = (
                        conv_transpose_out(h, *kernel, *stride, *padding),
                        conv_transpose_out(w, *kernel, *stride, *padding),
                    ) else {
                        return Err(err(i, format!("transposed conv produces an empty map from {h}x{w}")));
                    };
                    shape = vec![*out_channels, oh, ow];
                    Layer::TransposedConv {
                        weight: Tensor::zeros(vec![c, *out_channels, *kernel, *kernel]),
                        bias: Tensor::zeros(vec![*out_channels]),
                        stride: *stride,
                        padding: *padding,
                    }
                }
                LayerSpec::BatchNorm => {
                    let c = *shape.first().ok_or_else(|| err(i, "batchnorm on a scalar".into()))?;
                    if shape.len() != 1 && shape.len() != 3 {
                        return Err(err(i, format!("batchnorm expects [N] or [C, H, W], got {shape:?}")));
                    }
                    Layer::BatchNorm {
                        gamma: Tensor::full(vec![c], 1.0),
                        beta: Tensor::zeros(vec![c]),
                        running_mean: Tensor::zeros(vec![c]),
                        running_var: Tensor::full(vec![c], 1.0),
                    }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
                    }
                    Layer::Dropout { rate: *rate }
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    let [c, h, w] = shape[..] else {
                        return Err(err(i, format!("max pool expects [C, H, W], got {shape:?}")));
                    };
                    match (conv_out(h, *kernel, *stride, 0), conv_out(w, *kernel, *stride, 0)) {
                        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => shape = vec![c, oh, ow],
                        _ => return Err(err(i, format!("pooling underflows a {h}x{w} map"))),
                    }
                    Layer::MaxPool { kernel: *kernel, stride: *stride }
                }
                LayerSpec::GlobalAvgPool => {
                    let [c, _, _] = shape[..] else {
                        return Err(err(i, format!("global average pool expects [C, H, W], got {shape:?}")));
                    };
                    shape = vec![c];
                    Layer::GlobalAvgPool
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    Layer::Flatten
                }
                LayerSpec::Unflatten => {
                    let [n] = shape[..] else {
                        return Err(err(i, format!("unflatten expects a vector, got {shape:?}")));
                    };
                    shape = vec![n, 1, 1];
                    Layer::Unflatten
                }
                LayerSpec::Tap { name } => {
                    if tap_shapes.insert(name.clone(), shape.clone()).is_some() {
                        return Err(Error::InvalidArgument(format!("duplicate tap name `{name}`")));
                    }
                    Layer::Tap { name: name.clone() }
                }
            };
            layers.push(layer);
        }
        Ok(Network { input_shape: input_shape.to_vec(), specs, layers, output_shape: shape, tap_shapes, frozen: false })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// Per-sample shape of a tap activation.
    pub fn tap_shape(&self, name: &str) -> Result<&[usize]> {
        self.tap_shapes.get(name).map(Vec::as_slice).ok_or_else(|| Error::MissingTap(name.to_string()))
    }

    pub fn tap_names(&self) -> impl Iterator<Item = &str> {
        self.tap_shapes.keys().map(String::as_str)
    }

    /// A frozen network records its parameters as constants, so no gradient
    /// can reach them.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// He-style uniform weights in `±sqrt(6 / fan_in)`, zero biases, unit
    /// batch-norm scale. Deterministic per seed.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |t: &mut Tensor, fan_in: usize| {
            let b = fan_in_bound(fan_in);
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-b..b));
        };
        for layer in &mut self.layers {
            match layer {
                Layer::Linear { weight, bias } => {
                    let fan_in = weight.shape()[0];
                    fill(weight, fan_in);
                    bias.data_mut().fill(0.0);
                }
                Layer::Bottleneck { down, down_bias, up, up_bias } => {
                    let (w, inner) = (down.shape()[0], up.shape()[0]);
                    fill(down, w);
                    fill(up, inner);
                    down_bias.data_mut().fill(0.0);
                    up_bias.data_mut().fill(0.0);
                }
                Layer::Conv { weight, bias, .. } => {
                    let s = weight.shape();
                    let fan_in = s[1] * s[2] * s[3];
                    fill(weight, fan_in);
                    bias.data_mut().fill(0.0);
                }
                Layer::TransposedConv { weight, bias, stride, .. } => {
                    // each output receives about cin * k^2 / stride^2 terms
                    let s = weight.shape();
                    let fan_in = (s[0] * s[2] * s[3] / (*stride * *stride)).max(1);
                    fill(weight, fan_in);
                    bias.data_mut().fill(0.0);
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
                    gamma.data_mut().fill(1.0);
                    beta.data_mut().fill(0.0);
                    running_mean.data_mut().fill(0.0);
                    running_var.data_mut().fill(1.0);
                }
                _ => {}
            }
        }
    }

    fn layer_params(layer: &Layer) -> Vec<(&'static str, &Tensor)> {
        match layer {
            Layer::Linear { weight, bias } | Layer::Conv { weight, bias, .. } | Layer::TransposedConv { weight, bias, .. } => {
                vec![("weight", weight), ("bias", bias)]
            }
            Layer::Bottleneck { down, down_bias, up, up_bias } => {
                vec![("down.weight", down), ("down.bias", down_bias), ("up.weight", up), ("up.bias", up_bias)]
            }
            Layer::BatchNorm { gamma, beta, .. } => vec![("gamma", gamma), ("beta", beta)],
            _ => Vec::new(),
        }
    }

    fn layer_params_mut(layer: &mut Layer) -> Vec<&mut Tensor> {
        match layer {
            Layer::Linear { weight, bias } | Layer::Conv { weight, bias, .. } | Layer::TransposedConv { weight, bias, .. } => {
                vec![weight, bias]
            }
            Layer::Bottleneck { down, down_bias, up, up_bias } => vec![down, down_bias, up, up_bias],
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    /// Trainable parameters in registration order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in Self::layer_params(layer) {
                out.push((format!("{i}.{name}"), t));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Self::layer_params_mut).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Count of linear and convolutional weights and biases (batch-norm
    /// affine parameters excluded).
    pub fn weight_bias_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(name, _)| name.ends_with("weight") || name.ends_with("bias"))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Parameters and batch-norm buffers, by name.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in Self::layer_params(layer) {
                out.push((format!("{i}.{name}"), t.clone().with_requires_grad(false)));
            }
            if let Layer::BatchNorm { running_mean, running_var, .. } = layer {
                out.push((format!("{i}.running_mean"), running_mean.clone()));
                out.push((format!("{i}.running_var"), running_var.clone()));
            }
        }
        for (_, t) in &mut out {
            t.clear_grad();
        }
        out
    }

    /// Loads every entry of [`Network::state`] from `entries`, looked up by
    /// `prefix + name`.
    pub fn load_state(&mut self, entries: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let mut targets: Vec<(String, &mut Tensor)> = Vec::new();
            match layer {
                Layer::Linear { weight, bias } | Layer::Conv { weight, bias, .. } | Layer::TransposedConv { weight, bias, .. } => {
                    targets.push((format!("{i}.weight"), weight));
                    targets.push((format!("{i}.bias"), bias));
                }
                Layer::Bottleneck { down, down_bias, up, up_bias } => {
                    targets.push((format!("{i}.down.weight"), down));
                    targets.push((format!("{i}.down.bias"), down_bias));
                    targets.push((format!("{i}.up.weight"), up));
                    targets.push((format!("{i}.up.bias"), up_bias));
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
                    targets.push((format!("{i}.gamma"), gamma));
                    targets.push((format!("{i}.beta"), beta));
                    targets.push((format!("{i}.running_mean"), running_mean));
                    targets.push((format!("{i}.running_var"), running_var));
                }
                _ => {}
            }
            for (name, t) in targets {
                let key = format!("{prefix}{name}");
                let src = entries.get(&key).ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))?;
                if src.shape() != t.shape() {
                    return Err(Error::shape("load_state", format!("`{key}`: {:?} vs {:?}", src.shape(), t.shape())));
                }
                t.data_mut().copy_from_slice(src.data());
            }
        }
        Ok(())
    }

    /// Runs the layer stack. Pure: batch-norm running averages are returned
    /// in the [`Forward`] and only applied by [`Network::forward_with_taps`].
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape, x: Var, mode: Mode, rng: &mut R) -> Result<Forward> {
        let in_shape = tape.shape(x).to_vec();
        if in_shape.len() != self.input_shape.len() + 1 || in_shape[1..] != self.input_shape[..] {
            return Err(Error::shape(
                "forward",
                format!("network expects [batch, {:?}], got {in_shape:?}", self.input_shape),
            ));
        }
        let batch = in_shape[0];
        let mut h = x;
        let mut params = Vec::new();
        let mut taps = BTreeMap::new();
        let mut batch_stats = Vec::new();
        let frozen = self.frozen;
        let bind = |tape: &mut Tape, t: &Tensor, params: &mut Vec<Var>| -> Result<Var> {
            let v = if frozen { tape.constant(t)? } else { tape.param(t)? };
            params.push(v);
            Ok(v)
        };
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Linear { weight, bias } => {
                    let w = bind(tape, weight, &mut params)?;
                    let b = bind(tape, bias, &mut params)?;
                    let y = tape.matmul(h, w)?;
                    let shape = tape.shape(y).to_vec();
                    let bb = tape.broadcast(b, &shape)?;
                    tape.add(y, bb)?
                }
                Layer::Bottleneck { down, down_bias, up, up_bias } => {
                    let w1 = bind(tape, down, &mut params)?;
                    let b1 = bind(tape, down_bias, &mut params)?;
                    let w2 = bind(tape, up, &mut params)?;
                    let b2 = bind(tape, up_bias, &mut params)?;
                    let y = tape.matmul(h, w1)?;
                    let shape = tape.shape(y).to_vec();
                    let bb = tape.broadcast(b1, &shape)?;
                    let y = tape.add(y, bb)?;
                    let z = tape.matmul(y, w2)?;
                    let shape = tape.shape(z).to_vec();
                    let bb = tape.broadcast(b2, &shape)?;
                    tape.add(z, bb)?
                }
                Layer::Conv { weight, bias, stride, padding } => {
                    let w = bind(tape, weight, &mut params)?;
                    let b = bind(tape, bias, &mut params)?;
                    let y = tape.conv2d(h, w, *stride, *padding)?;
                    add_channel_bias(tape, y, b)?
                }
                Layer::TransposedConv { weight, bias, stride, padding } => {
                    let w = bind(tape, weight, &mut params)?;
                    let b = bind(tape, bias, &mut params)?;
                    let y = tape.conv_transpose2d(h, w, *stride, *padding)?;
                    add_channel_bias(tape, y, b)?
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
                    let g = bind(tape, gamma, &mut params)?;
                    let b = bind(tape, beta, &mut params)?;
                    let stats = match mode {
                        Mode::Train => BatchNormStats::Batch { eps: BN_EPS },
                        Mode::Eval => BatchNormStats::Running { mean: running_mean.data(), var: running_var.data(), eps: BN_EPS },
                    };
                    let (y, st) = tape.batchnorm(h, g, b, stats)?;
                    if let Some((m, v)) = st {
                        batch_stats.push((i, m, v));
                    }
                    y
                }
                Layer::Relu => tape.relu(h)?,
                Layer::Dropout { rate } => match mode {
                    Mode::Train if *rate > 0.0 => tape.dropout(h, *rate, rng)?,
                    _ => h,
                },
                Layer::MaxPool { kernel, stride } => tape.max_pool2d(h, *kernel, *stride)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(h)?,
                Layer::Flatten => tape.flatten(h)?,
                Layer::Unflatten => {
                    let n = tape.shape(h)[1];
                    tape.reshape(h, &[batch, n, 1, 1])?
                }
                Layer::Tap { name } => {
                    taps.insert(name.clone(), h);
                    h
                }
            };
        }
        Ok(Forward { output: h, taps: TapActivations(taps), params, batch_stats })
    }

    /// [`Network::forward`] followed, in train mode, by the running-average
    /// update of every batch-norm layer.
    pub fn forward_with_taps<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward> {
        let fwd = self.forward(tape, x, mode, rng)?;
        for (i, mean, var) in &fwd.batch_stats {
            if let Layer::BatchNorm { running_mean, running_var, .. } = &mut self.layers[*i] {
                for (r, m) in running_mean.data_mut().iter_mut().zip(mean) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
                }
                for (r, v) in running_var.data_mut().iter_mut().zip(var) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
                }
            }
        }
        Ok(fwd)
    }

    /// Eval-mode forward on a detached tape; returns the output and every tap.
    pub fn eval(&self, x: &Tensor) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut tape, xv, Mode::Eval, &mut rng)?;
        let taps = fwd.taps.iter().map(|(k, v)| (k.to_string(), tape.tensor(v))).collect();
        Ok((tape.tensor(fwd.output), taps))
    }

    /// Copies the gradients of the parameters bound in `fwd` into each
    /// parameter's `grad` buffer.
    pub fn collect_grads(&mut self, fwd: &Forward, grads: &Gradients) -> Result<()> {
        let frozen = self.frozen;
        let mut params = self.params_mut();
        if params.len() != fwd.params.len() {
            return Err(Error::InvalidArgument("forward pass belongs to a different network".into()));
        }
        for (i, (p, v)) in params.iter_mut().zip(&fwd.params).enumerate() {
            if frozen {
                p.clear_grad();
                continue;
            }
            let g = grads.get(*v).ok_or_else(|| Error::MissingGrad(format!("parameter #{i}")))?;
            p.set_grad(g.to_vec())?;
        }
        Ok(())
    }
}

fn add_channel_bias(tape: &mut Tape, y: Var, bias: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let c = shape[1];
    let b = tape.reshape(bias, &[c, 1, 1])?;
    let bb = tape.broadcast(b, &shape)?;
    tape.add(y, bb)
}
