use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Mode, Network};
use crate::tensor::{Tape, Tensor};
use crate::train::{clip_grad_norm, lr_at, sgd_step, OptimizerState, TrainConfig};
use crate::transfer::{Layout, VariationalGaussian, DEFAULT_EPSILON};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiBenchConfig {
    #[serde(default = "default_samples")]
    pub n_train: usize,
    #[serde(default = "default_samples")]
    pub n_eval: usize,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
}

fn default_samples() -> usize {
    50_000
}

fn default_train() -> TrainConfig {
    TrainConfig { epochs: 6, batch_size: 500, base_lr: 0.1, momentum: 0.9, ..TrainConfig::default() }
}

impl Default for MiBenchConfig {
    fn default() -> Self {
        MiBenchConfig { n_train: default_samples(), n_eval: default_samples(), train: default_train() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub rho: f64,
    /// `H(t) + mean log q(t | s)` on held-out samples, in nats.
    pub bound: f64,
    pub standard_error: f64,
    pub i_true: Option<f64>,
    pub entropy: Option<f64>,
}

/// Mutual information of a standard bivariate normal with correlation `rho`.
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

fn sample_pairs(rho: f64, n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let c = (1.0 - rho * rho).sqrt();
    let mut s = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        s.push(a);
        t.push(rho * a + c * e);
    }
    (Tensor::new(vec![n, 1], s).unwrap(), Tensor::new(vec![n, 1], t).unwrap())
}

/// Per-sample `log q(t | s)` including the normalizing constant.
fn log_q(q: &VariationalGaussian, s: &Tensor, t: &Tensor) -> Result<Vec<f64>> {
    let (mu, _) = q.mean_net.eval(s)?;
    let var = q.variance()[0];
    let c = 0.5 * (2.0 * std::f64::consts::PI * var).ln();
    Ok(t.data().iter().zip(mu.data()).map(|(t, m)| -c - (t - m).powi(2) / (2.0 * var)).collect())
}

/// Fits a linear-mean Gaussian `q(t | s)` to samples of a standard bivariate
/// normal with correlation `rho` and reports the variational bound on
/// held-out samples.
pub fn mi_bound_bench(rho: f64, cfg: &MiBenchConfig) -> Result<MiEstimate> {
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!("|rho| must be below 1, got {rho}")));
    }
    if cfg.n_train == 0 || cfg.n_eval < 2 {
        return Err(Error::InvalidArgument("MI bench needs training samples and at least two evaluation samples".into()));
    }
    let tc = &cfg.train;
    tc.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let (s_train, t_train) = sample_pairs(rho, cfg.n_train, &mut rng);
    let (s_eval, t_eval) = sample_pairs(rho, cfg.n_eval, &mut rng);

    let mut net = Network::new(&[1], vec![LayerSpec::Linear { out_features: 1 }])?;
    net.init_params(tc.seed);
    let mut q = VariationalGaussian::new(net, Layout::Vector, DEFAULT_EPSILON)?;
    let mut state = OptimizerState::new(tc.base_lr);
    let mut order: Vec<usize> = (0..cfg.n_train).collect();
    for epoch in 0..tc.epochs {
        state.lr = lr_at(epoch, tc);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for rows in order.chunks(tc.batch_size) {
            let mut tape = Tape::new();
            let sv = tape.constant(&s_train.select_rows(rows)?)?;
            let tv = tape.constant(&t_train.select_rows(rows)?)?;
            let pass = q.nll(&mut tape, tv, sv, Mode::Train, &mut rng, true)?;
            let grads = tape.backward(pass.nll)?;
            q.collect_grads(&pass, &grads)?;
            let mut params = q.params_mut();
            clip_grad_norm(&mut params, tc.grad_clip_norm);
            sgd_step(&mut params, &mut state, tc)?;
        }
    }

    let lq = log_q(&q, &s_eval, &t_eval)?;
    let n = lq.len() as f64;
    let mean = lq.iter().sum::<f64>() / n;
    let sd = (lq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let entropy = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    Ok(MiEstimate {
        rho,
        bound: entropy + mean,
        standard_error: sd / n.sqrt(),
        i_true: Some(gaussian_mi(rho)),
        entropy: Some(entropy),
    })
}
