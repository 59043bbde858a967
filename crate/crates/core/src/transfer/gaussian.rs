use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Forward, Mode, Network};
use crate::tensor::{softplus, softplus_inverse, Gradients, Tape, Tensor, Var};

/// Variance floor added after the softplus.
pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Initial value of every variance `sigma^2`.
pub const INIT_VARIANCE: f64 = 5.0;

/// How the variance vector is laid out against the target activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Target `[C, H, W]`, one variance per channel.
    Conv,
    /// Target `[N]`, one variance per dimension.
    Vector,
}

/// `q(t | s) = N(t; mean_net(s), diag(softplus(alpha) + epsilon))`.
#[derive(Clone, Debug)]
pub struct VariationalGaussian {
    pub mean_net: Network,
    pub alpha: Tensor,
    pub epsilon: f64,
    pub layout: Layout,
    /// When false, `alpha` is held fixed during training.
    pub learn_variance: bool,
}

/// Tape handles from one [`VariationalGaussian::nll`] evaluation.
#[derive(Debug)]
pub struct QPass {
    pub nll: Var,
    pub mean: Var,
    alpha: Var,
    mean_fwd: Forward,
}

impl VariationalGaussian {
    pub fn new(mean_net: Network, layout: Layout, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("variance floor must be positive, got {epsilon}")));
        }
        let out = mean_net.output_shape();
        let n = match (layout, out) {
            (Layout::Conv, [c, _, _]) => *c,
            (Layout::Vector, [n]) => *n,
            _ => return Err(Error::shape("variational_gaussian", format!("{layout:?} layout with mean output {out:?}"))),
        };
        let mut q = VariationalGaussian {
            mean_net,
            alpha: Tensor::zeros(vec![n]),
            epsilon,
            layout,
            learn_variance: true,
        };
        q.set_variance(INIT_VARIANCE)?;
        Ok(q)
    }

    /// Per-sample shape of the modeled activation.
    pub fn target_shape(&self) -> &[usize] {
        self.mean_net.output_shape()
    }

    /// Number of scalar dimensions of the target (`C*H*W` or `N`).
    pub fn target_size(&self) -> usize {
        self.target_shape().iter().product()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.alpha.data().iter().map(|a| softplus(*a) + self.epsilon).collect()
    }

    /// Sets every variance to `value` by inverting the softplus.
    pub fn set_variance(&mut self, value: f64) -> Result<()> {
        if !(value > self.epsilon) {
            return Err(Error::InvalidArgument(format!("variance {value} must exceed the floor {}", self.epsilon)));
        }
        let a = softplus_inverse(value - self.epsilon);
        self.alpha.data_mut().fill(a);
        Ok(())
    }

    /// Initializes the mean network and resets the variances.
    pub fn init(&mut self, seed: u64) -> Result<()> {
        self.mean_net.init_params(seed);
        self.set_variance(INIT_VARIANCE)
    }

    /// Negative log-likelihood of teacher activation `t` given student
    /// activation `s`, summed over dimensions and averaged over the batch.
    pub fn nll<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        t: Var,
        s: Var,
        mode: Mode,
        rng: &mut R,
        include_constant: bool,
    ) -> Result<QPass> {
        let mean_fwd = self.mean_net.forward_with_taps(tape, s, mode, rng)?;
        let alpha = if self.learn_variance { tape.param(&self.alpha)? } else { tape.constant(&self.alpha)? };
        let nll = gaussian_nll(tape, t, mean_fwd.output, alpha, self.epsilon, self.layout, include_constant)?;
        Ok(QPass { nll, mean: mean_fwd.output, alpha, mean_fwd })
    }

    pub fn collect_grads(&mut self, pass: &QPass, grads: &Gradients) -> Result<()> {
        self.mean_net.collect_grads(&pass.mean_fwd, grads)?;
        if self.learn_variance {
            let g = grads.get(pass.alpha).ok_or_else(|| Error::MissingGrad("alpha".into()))?;
            self.alpha.set_grad(g.to_vec())?;
        } else {
            self.alpha.clear_grad();
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.mean_net.params_mut();
        if self.learn_variance {
            p.push(&mut self.alpha);
        }
        p
    }
}

/// `sum_i [ log sigma_i + (t_i - mu_i)^2 / (2 sigma_i^2) ] / B`, with
/// `sigma^2 = softplus(alpha) + epsilon` and `i` ranging over every
/// dimension of one sample. `t` and `mu` are `[B, C, H, W]` / `[C, H, W]`
/// (conv layout, `alpha: [C]`) or `[B, N]` / `[N]` (vector layout,
/// `alpha: [N]`). `include_constant` adds `0.5 * ln(2 pi)` per dimension.
pub fn gaussian_nll(
    tape: &mut Tape,
    t: Var,
    mu: Var,
    alpha: Var,
    epsilon: f64,
    layout: Layout,
    include_constant: bool,
) -> Result<Var> {
    let shape = tape.shape(t).to_vec();
    if tape.shape(mu) != shape.as_slice() {
        return Err(Error::shape("gaussian_nll", format!("target {shape:?} vs mean {:?}", tape.shape(mu))));
    }
    let (batch, per_sample, vshape) = match (layout, shape.as_slice()) {
        (Layout::Conv, &[b, c, h, w]) => (b, c * h * w, vec![c, 1, 1]),
        (Layout::Conv, &[c, h, w]) => (1, c * h * w, vec![c, 1, 1]),
        (Layout::Vector, &[b, n]) => (b, n, vec![n]),
        (Layout::Vector, &[n]) => (1, n, vec![n]),
        _ => return Err(Error::shape("gaussian_nll", format!("{layout:?} layout cannot model {shape:?}"))),
    };
    if tape.value(alpha).len() != vshape[0] {
        return Err(Error::shape(
            "gaussian_nll",
            format!("{} variance parameters for {} channels", tape.value(alpha).len(), vshape[0]),
        ));
    }
    if batch == 0 {
        return Err(Error::shape("gaussian_nll", "empty batch"));
    }
    let var = tape.softplus(alpha)?;
    let var = tape.add_scalar(var, epsilon)?;
    let var = tape.reshape(var, &vshape)?;
    let log_var = tape.log(var)?;
    let var_b = tape.broadcast(var, &shape)?;
    let log_var_b = tape.broadcast(log_var, &shape)?;

    let diff = tape.sub(t, mu)?;
    let sq = tape.square(diff)?;
    let two_var = tape.scalar_mul(var_b, 2.0)?;
    let quad = tape.div(sq, two_var)?;
    let half_log = tape.scalar_mul(log_var_b, 0.5)?;
    let terms = tape.add(quad, half_log)?;
    let total = tape.sum(terms)?;
    let mut out = tape.scalar_mul(total, 1.0 / batch as f64)?;
    if include_constant {
        let c = per_sample as f64 * 0.5 * (2.0 * std::f64::consts::PI).ln();
        out = tape.add_scalar(out, c)?;
    }
    Ok(out)
}
