use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{sigmoid, softplus, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics used by [`Tape::batchnorm`].
#[derive(Clone, Copy, Debug)]
pub enum BatchNormStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch { eps: f64 },
    /// Normalize with fixed running estimates.
    Running { mean: &'a [f64], var: &'a [f64], eps: f64 },
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom, batch: usize, cout: usize },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom, batch: usize, cin: usize },
    Relu(Var),
    Softplus(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Elementwise { x: Var, df: fn(f64) -> f64 },
    Sum(Var),
    Mean(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var, spatial: usize },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        channels: usize,
        spatial: usize,
        train: bool,
    },
    Dropout { x: Var, mask: Vec<f64> },
    Softmax { x: Var, cols: usize },
    LogSoftmax { x: Var, cols: usize },
    Reshape(Var),
    Broadcast { x: Var, index: Vec<usize> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` for values that do not require gradients.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Records primitive applications for one forward pass and replays them in
/// reverse. A tape can be differentiated once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn zeros_like(len: usize) -> Vec<f64> {
    vec![0.0; len]
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::UnknownVar)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element variable.
    pub fn item(&self, v: Var) -> Result<f64> {
        match self.node(v)?.value.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::NotScalar(self.shape(v).to_vec())),
        }
    }

    /// Detached copy of a recorded value.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape matches value")
    }

    fn push(
        &mut self,
        op_name: &'static str,
        op: Op,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
    ) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        check_finite(op_name, &value)?;
        self.nodes.push(Node { shape, value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf; gradients are tracked if `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push("leaf", Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push("constant", Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Records a leaf that always receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.push("param", Op::Leaf, t.shape().to_vec(), t.data().to_vec(), true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.node(a)?.shape, &self.node(b)?.shape);
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let value = na.value.iter().zip(&nb.value).map(|(x, y)| f(*x, *y)).collect();
        let rg = na.requires_grad || nb.requires_grad;
        let shape = na.shape.clone();
        self.push(name, op, shape, value, rg)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let n = self.node(x)?;
        let value = n.value.iter().map(|v| f(*v)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(name, op, shape, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scalar_mul", x, |v| c * v, Op::ScalarMul(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn elementwise(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Result<Var> {
        self.unary("elementwise", x, f, Op::Elementwise { x, df })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let s = n.value.iter().fold(0.0, |acc, v| acc + v);
        let rg = n.requires_grad;
        self.push("sum", Op::Sum(x), Vec::new(), vec![s], rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        if n.value.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = n.value.iter().fold(0.0, |acc, v| acc + v) / n.value.len() as f64;
        let rg = n.requires_grad;
        self.push("mean", Op::Mean(x), Vec::new(), vec![s], rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.shape.clone(), self.node(b)?.shape.clone());
        let (m, k, k2, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(Error::shape("matmul", format!("expected 2-D operands, got {sa:?} and {sb:?}"))),
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dimensions {k} and {k2} differ ({sa:?} x {sb:?})")));
        }
        let mut out = zeros_like(m * n);
        kernels::gemm(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push("matmul", Op::Matmul { a, b, m, k, n }, vec![m, n], out, rg)
    }

    fn image_shape(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        match self.node(x)?.shape.as_slice() {
            &[b, c, h, w] => Ok([b, c, h, w]),
            s => Err(Error::shape(op, format!("expected [batch, channels, height, width], got {s:?}"))),
        }
    }

    /// 2-D cross-correlation. `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let [batch, cin, h, wd] = self.image_shape("conv2d", x)?;
        let [cout, wcin, kh, kw] = match self.node(w)?.shape.as_slice() {
            &[a, b, c, d] => [a, b, c, d],
            s => return Err(Error::shape("conv2d", format!("kernel must be 4-D, got {s:?}"))),
        };
        if wcin != cin {
            return Err(Error::shape("conv2d", format!("input has {cin} channels, kernel expects {wcin}")));
        }
        let (out_h, out_w) = match (kernels::conv_out(h, kh, stride, pad), kernels::conv_out(wd, kw, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape("conv2d", format!("{kh}x{kw} kernel does not fit {h}x{wd} input"))),
        };
        let geom = ConvGeom { channels: cin, height: h, width: wd, kh, kw, stride, pad, out_h, out_w };
        let (krows, ncols) = (geom.col_rows(), geom.col_cols());
        let out = {
            let cols = kernels::im2col_batch(&self.nodes[x.0].value, &geom, batch);
            let mut out_cm = zeros_like(cout * batch * ncols);
            kernels::gemm(&self.nodes[w.0].value, &cols, &mut out_cm, cout, krows, batch * ncols);
            kernels::batch_major(&out_cm, batch, cout, ncols)
        };
        let rg = self.nodes[x.0].requires_grad || self.nodes[w.0].requires_grad;
        self.push("conv2d", Op::Conv2d { x, w, geom, batch, cout }, vec![batch, cout, out_h, out_w], out, rg)
    }

    /// Transposed convolution. `x: [B, Cin, H, W]`, `w: [Cin, Cout, kh, kw]`;
    /// output extent is `(H - 1) * stride - 2 * pad + kh`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let [batch, cin, h, wd] = self.image_shape("transposed_conv2d", x)?;
        let [wcin, cout, kh, kw] = match self.node(w)?.shape.as_slice() {
            &[a, b, c, d] => [a, b, c, d],
            s => return Err(Error::shape("transposed_conv2d", format!("kernel must be 4-D, got {s:?}"))),
        };
        if wcin != cin {
            return Err(Error::shape(
                "transposed_conv2d",
                format!("input has {cin} channels, kernel expects {wcin}"),
            ));
        }
        let (oh, ow) = match (
            kernels::conv_transpose_out(h, kh, stride, pad),
            kernels::conv_transpose_out(wd, kw, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape("transposed_conv2d", format!("empty output for {h}x{wd} input"))),
        };
        // The geometry of the adjoint convolution, whose input is our output.
        let geom = ConvGeom { channels: cout, height: oh, width: ow, kh, kw, stride, pad, out_h: h, out_w: wd };
        let (krows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut out = zeros_like(batch * cout * oh * ow);
        {
            let x_cm = kernels::channel_major(&self.nodes[x.0].value, batch, cin, ncols);
            let mut cols = zeros_like(krows * batch * ncols);
            kernels::gemm_at_b(&self.nodes[w.0].value, &x_cm, &mut cols, cin, krows, batch * ncols);
            kernels::col2im_batch(&cols, &geom, batch, &mut out);
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[w.0].requires_grad;
        self.push(
            "transposed_conv2d",
            Op::ConvTranspose2d { x, w, geom, batch, cin },
            vec![batch, cout, oh, ow],
            out,
            rg,
        )
    }

    /// Max pooling over `k x k` windows; ties resolve to the first maximum.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let [batch, c, h, w] = self.image_shape("max_pool2d", x)?;
        let (oh, ow) = match (kernels::conv_out(h, k, stride, 0), kernels::conv_out(w, k, stride, 0)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape("max_pool2d", format!("{k}x{k} window does not fit {h}x{w}"))),
        };
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(batch * c * oh * ow);
        let mut argmax = Vec::with_capacity(batch * c * oh * ow);
        for plane in 0..batch * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * stride * w + j * stride;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = base + (i * stride + di) * w + j * stride + dj;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push("max_pool2d", Op::MaxPool { x, argmax }, vec![batch, c, oh, ow], out, rg)
    }

    /// `[B, C, H, W] -> [B, C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [batch, c, h, w] = self.image_shape("global_avg_pool", x)?;
        let spatial = h * w;
        let xv = &self.nodes[x.0].value;
        let out = xv
            .chunks(spatial)
            .map(|p| p.iter().fold(0.0, |a, v| a + v) / spatial as f64)
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push("global_avg_pool", Op::GlobalAvgPool { x, spatial }, vec![batch, c], out, rg)
    }

    /// Per-channel normalization of `[B, C]` or `[B, C, H, W]` input.
    ///
    /// Returns the output and, in batch mode, the batch mean and (biased)
    /// variance so the caller can maintain running estimates.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BatchNormStats<'_>,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let shape = self.node(x)?.shape.clone();
        let (batch, channels, spatial) = match shape.as_slice() {
            &[b, c] => (b, c, 1),
            &[b, c, h, w] => (b, c, h * w),
            s => return Err(Error::shape("batchnorm", format!("expected 2-D or 4-D input, got {s:?}"))),
        };
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.node(p)?.shape != [channels] {
                return Err(Error::shape(
                    "batchnorm",
                    format!("{name} has shape {:?}, expected [{channels}]", self.nodes[p.0].shape),
                ));
            }
        }
        if batch == 0 {
            return Err(Error::shape("batchnorm", "empty batch"));
        }
        let xv = &self.nodes[x.0].value;
        let count = (batch * spatial) as f64;
        let idx = |b: usize, c: usize| (b * channels + c) * spatial;
        let (mean, var, eps, train) = match stats {
            BatchNormStats::Batch { eps } => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut s = 0.0;
                    for b in 0..batch {
                        for v in &xv[idx(b, c)..idx(b, c) + spatial] {
                            s += v;
                        }
                    }
                    let m = s / count;
                    let mut s2 = 0.0;
                    for b in 0..batch {
                        for v in &xv[idx(b, c)..idx(b, c) + spatial] {
                            s2 += (v - m) * (v - m);
                        }
                    }
                    mean[c] = m;
                    var[c] = s2 / count;
                }
                (mean, var, eps, true)
            }
            BatchNormStats::Running { mean, var, eps } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::shape("batchnorm", "running statistics length differs from channels"));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for c in 0..channels {
                let start = idx(b, c);
                for i in start..start + spatial {
                    let h = (xv[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = gv[c] * h + bv[c];
                }
            }
        }
        let rg = [x, gamma, beta].iter().any(|v| self.nodes[v.0].requires_grad);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, channels, spatial, train };
        let y = self.push("batchnorm", op, shape, out, rg)?;
        Ok((y, train.then_some((mean, var))))
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        let n = self.node(x)?;
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n.value.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = n.value.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push("dropout", Op::Dropout { x, mask }, shape, out, rg)
    }

    fn rows_cols(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        match self.node(x)?.shape.as_slice() {
            &[r, c] if c > 0 => Ok((r, c)),
            s => Err(Error::shape(op, format!("expected [rows, cols], got {s:?}"))),
        }
    }

    /// Row-wise softmax of logits `[B, N]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols("softmax", x)?;
        let n = &self.nodes[x.0];
        let mut out = Vec::with_capacity(n.value.len());
        for row in n.value.chunks(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z = e.iter().fold(0.0, |a, v| a + v);
            out.extend(e.iter().map(|v| v / z));
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push("softmax", Op::Softmax { x, cols }, shape, out, rg)
    }

    /// Row-wise log-softmax of logits `[B, N]`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols("log_softmax", x)?;
        let n = &self.nodes[x.0];
        let mut out = Vec::with_capacity(n.value.len());
        for row in n.value.chunks(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = row.iter().fold(0.0, |a, v| a + (v - m).exp());
            let lz = m + z.ln();
            out.extend(row.iter().map(|v| v - lz));
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push("log_softmax", Op::LogSoftmax { x, cols }, shape, out, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.node(x)?;
        if shape.iter().product::<usize>() != n.value.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", n.shape)));
        }
        let (value, rg) = (n.value.clone(), n.requires_grad);
        self.push("reshape", Op::Reshape(x), shape.to_vec(), value, rg)
    }

    /// `[B, ...] -> [B, prod(...)]`
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.node(x)?.shape.clone();
        let Some((&b, rest)) = shape.split_first() else {
            return Err(Error::shape("flatten", "scalar input"));
        };
        self.reshape(x, &[b, rest.iter().product()])
    }

    /// Broadcasts with right-aligned axes; source axes must equal the target
    /// axis or be 1.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.node(x)?.shape.clone();
        if src.len() > shape.len() {
            return Err(Error::shape("broadcast", format!("{src:?} -> {shape:?}")));
        }
        let lead = shape.len() - src.len();
        let mut src_strides = vec![0usize; shape.len()];
        let mut stride = 1;
        for (i, &d) in src.iter().enumerate().rev() {
            let t = shape[lead + i];
            if d != t && d != 1 {
                return Err(Error::shape("broadcast", format!("{src:?} -> {shape:?}")));
            }
            src_strides[lead + i] = if d == 1 { 0 } else { stride };
            stride *= d;
        }
        let total: usize = shape.iter().product();
        let mut index = Vec::with_capacity(total);
        let mut coord = vec![0usize; shape.len()];
        for _ in 0..total {
            index.push(coord.iter().zip(&src_strides).map(|(c, s)| c * s).sum());
            for ax in (0..shape.len()).rev() {
                coord[ax] += 1;
                if coord[ax] < shape[ax] {
                    break;
                }
                coord[ax] = 0;
            }
        }
        let n = &self.nodes[x.0];
        let value = index.iter().map(|&i| n.value[i]).collect();
        let rg = n.requires_grad;
        self.push("broadcast", Op::Broadcast { x, index }, shape.to_vec(), value, rg)
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && g.is_none() {
                *g = Some(zeros_like(node.value.len()));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| zeros_like(nodes[v.0].value.len()));
                f(buf);
            }
        };
        let val = |v: Var| nodes[v.0].value.as_slice();
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((x, gy), bb) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * bb;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gy), aa) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * aa;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((x, gy), bb) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy / bb;
                    }
                });
                acc(*b, &mut |gb| {
                    for (j, x) in gb.iter_mut().enumerate() {
                        *x -= g[j] * av[j] / (bv[j] * bv[j]);
                    }
                });
            }
            Op::ScalarMul(x, c) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, gy)| *a += c * gy)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, gy)| *a += gy))
            }
            Op::Matmul { a, b, m, k, n } => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| kernels::gemm_a_bt(g, bv, ga, *m, *n, *k));
                acc(*b, &mut |gb| kernels::gemm_at_b(av, g, gb, *m, *k, *n));
            }
            Op::Conv2d { x, w, geom, batch, cout } => {
                let (xv, wv) = (val(*x), val(*w));
                let (krows, n) = (geom.col_rows(), geom.col_cols() * batch);
                let g_cm = kernels::channel_major(g, *batch, *cout, geom.col_cols());
                acc(*w, &mut |gw| {
                    let cols = kernels::im2col_batch(xv, geom, *batch);
                    kernels::gemm_a_bt(&g_cm, &cols, gw, *cout, n, krows);
                });
                acc(*x, &mut |gx| {
                    let mut cols = zeros_like(krows * n);
                    kernels::gemm_at_b(wv, &g_cm, &mut cols, *cout, krows, n);
                    kernels::col2im_batch(&cols, geom, *batch, gx);
                });
            }
            Op::ConvTranspose2d { x, w, geom, batch, cin } => {
                let (xv, wv) = (val(*x), val(*w));
                let (krows, ncols) = (geom.col_rows(), geom.col_cols());
                let n = ncols * batch;
                let gcols = kernels::im2col_batch(g, geom, *batch);
                acc(*x, &mut |gx| {
                    let mut gx_cm = zeros_like(*cin * n);
                    kernels::gemm(wv, &gcols, &mut gx_cm, *cin, krows, n);
                    for (a, v) in gx.iter_mut().zip(kernels::batch_major(&gx_cm, *batch, *cin, ncols)) {
                        *a += v;
                    }
                });
                acc(*w, &mut |gw| {
                    let x_cm = kernels::channel_major(xv, *batch, *cin, ncols);
                    kernels::gemm_a_bt(&x_cm, &gcols, gw, *cin, n, krows);
                });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, gy), v) in gx.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *a += gy;
                        }
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, gy), v) in gx.iter_mut().zip(g).zip(xv) {
                        *a += gy * sigmoid(*v);
                    }
                });
            }
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, gy), v) in gx.iter_mut().zip(g).zip(xv) {
                        *a += gy / v;
                    }
                });
            }
            Op::Exp(x) => acc(*x, &mut |gx| {
                for ((a, gy), y) in gx.iter_mut().zip(g).zip(out) {
                    *a += gy * y;
                }
            }),
            Op::Square(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, gy), v) in gx.iter_mut().zip(g).zip(xv) {
                        *a += 2.0 * v * gy;
                    }
                });
            }
            Op::Elementwise { x, df } => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, gy), v) in gx.iter_mut().zip(g).zip(xv) {
                        *a += gy * df(*v);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::MaxPool { x, argmax } => acc(*x, &mut |gx| {
                for (gy, &j) in g.iter().zip(argmax) {
                    gx[j] += gy;
                }
            }),
            Op::GlobalAvgPool { x, spatial } => acc(*x, &mut |gx| {
                for (plane, gy) in gx.chunks_mut(*spatial).zip(g) {
                    let share = gy / *spatial as f64;
                    plane.iter_mut().for_each(|a| *a += share);
                }
            }),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, channels, spatial, train } => {
                let (c_n, s_n) = (*channels, *spatial);
                let batch = xhat.len() / (c_n * s_n);
                let gv = val(*gamma);
                let mut sum_g = vec![0.0; c_n];
                let mut sum_gx = vec![0.0; c_n];
                for b in 0..batch {
                    for c in 0..c_n {
                        let start = (b * c_n + c) * s_n;
                        for j in start..start + s_n {
                            sum_g[c] += g[j];
                            sum_gx[c] += g[j] * xhat[j];
                        }
                    }
                }
                acc(*beta, &mut |gb| gb.iter_mut().zip(&sum_g).for_each(|(a, s)| *a += s));
                acc(*gamma, &mut |gg| gg.iter_mut().zip(&sum_gx).for_each(|(a, s)| *a += s));
                let count = (batch * s_n) as f64;
                acc(*x, &mut |gx| {
                    for b in 0..batch {
                        for c in 0..c_n {
                            let start = (b * c_n + c) * s_n;
                            let scale = gv[c] * inv_std[c];
                            for j in start..start + s_n {
                                gx[j] += if *train {
                                    scale * (g[j] - sum_g[c] / count - xhat[j] * sum_gx[c] / count)
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |gx| {
                for ((a, gy), m) in gx.iter_mut().zip(g).zip(mask) {
                    *a += gy * m;
                }
            }),
            Op::Softmax { x, cols } => acc(*x, &mut |gx| {
                for ((gxr, gr), yr) in gx.chunks_mut(*cols).zip(g.chunks(*cols)).zip(out.chunks(*cols)) {
                    let dot = gr.iter().zip(yr).fold(0.0, |s, (a, b)| s + a * b);
                    for ((a, gy), y) in gxr.iter_mut().zip(gr).zip(yr) {
                        *a += y * (gy - dot);
                    }
                }
            }),
            Op::LogSoftmax { x, cols } => acc(*x, &mut |gx| {
                for ((gxr, gr), yr) in gx.chunks_mut(*cols).zip(g.chunks(*cols)).zip(out.chunks(*cols)) {
                    let total = gr.iter().fold(0.0, |s, a| s + a);
                    for ((a, gy), y) in gxr.iter_mut().zip(gr).zip(yr) {
                        *a += gy - y.exp() * total;
                    }
                }
            }),
            Op::Broadcast { x, index } => acc(*x, &mut |gx| {
                for (gy, &j) in g.iter().zip(index) {
                    gx[j] += gy;
                }
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_example() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[1, 2], &[1.0, 2.0])).unwrap();
        let b = tape.constant(&t(&[2, 1], &[3.0, 4.0])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[1, 1]);
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_dimensions() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.constant(&Tensor::zeros(vec![2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("3") && err.contains("2"), "{err}");
    }

    #[test]
    fn softplus_at_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::scalar(0.0)).unwrap();
        let y = tape.softplus(a).unwrap();
        assert!((tape.item(y).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn identity_kernel_conv() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(vec![1, 1, 3, 3], 1.0)).unwrap();
        let w = tape.constant(&Tensor::full(vec![1, 1, 1, 1], 1.0)).unwrap();
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert!(tape.value(y).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::from_vec(vec![3.0])).unwrap();
        let sq = tape.square(w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w), Some(&[6.0][..]));
    }

    #[test]
    fn softplus_gradient_is_sigmoid() {
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::scalar(0.0)).unwrap();
        let y = tape.softplus(a).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(a), Some(&[0.5][..]));
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::scalar(1.0)).unwrap();
        let y = tape.square(a).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
        assert!(matches!(tape.square(a), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(tape.backward(a), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::scalar(2.0)).unwrap();
        let c = tape.constant(&Tensor::scalar(5.0)).unwrap();
        let y = tape.mul(a, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(a), Some(&[5.0][..]));
        assert_eq!(g.get(c), None);
    }

    #[test]
    fn broadcast_channel_vector() {
        let mut tape = Tape::new();
        let c = tape.param(&t(&[2, 1, 1], &[1.0, 2.0])).unwrap();
        let y = tape.broadcast(c, &[1, 2, 2, 2]).unwrap();
        assert_eq!(tape.value(y), &[1., 1., 1., 1., 2., 2., 2., 2.]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(c), Some(&[4.0, 4.0][..]));
    }

    #[test]
    fn transposed_conv_output_size() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(vec![1, 3, 1, 1], 1.0)).unwrap();
        let w = tape.constant(&Tensor::full(vec![3, 2, 4, 4], 1.0)).unwrap();
        let y = tape.conv_transpose2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 4, 4]);
        assert!(tape.value(y).iter().all(|v| *v == 3.0));
        let w2 = tape.constant(&Tensor::full(vec![2, 2, 4, 4], 1.0)).unwrap();
        let z = tape.conv_transpose2d(y, w2, 2, 1).unwrap();
        assert_eq!(tape.shape(z), &[1, 2, 8, 8]);
    }
}
