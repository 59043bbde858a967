use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::TrainConfig;

#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
    pub lr: f64,
    pub epoch: usize,
}

impl OptimizerState {
    pub fn new(lr: f64) -> Self {
        OptimizerState { velocity: Vec::new(), lr, epoch: 0 }
    }
}

/// `v = momentum * v + g + weight_decay * w; w -= lr * v`.
pub fn sgd_step(params: &mut [&mut Tensor], state: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} tensors, got {}",
            state.velocity.len(),
            params.len()
        )));
    }
    for (i, (p, v)) in params.iter_mut().zip(&mut state.velocity).enumerate() {
        if v.len() != p.numel() {
            return Err(Error::shape("sgd_step", format!("buffer {i} has {} entries for {} values", v.len(), p.numel())));
        }
        let g = p.grad().ok_or_else(|| Error::MissingGrad(format!("parameter #{i}")))?.to_vec();
        for ((w, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *w;
            *w -= state.lr * *vi;
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the applied scale, 1 when no clipping happened.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let sq: f64 = params.iter().filter_map(|p| p.grad()).flat_map(|g| g.iter()).map(|g| g * g).sum();
    let norm = sq.sqrt();
    if norm <= max_norm {
        return 1.0;
    }
    let scale = max_norm / norm;
    for p in params.iter_mut() {
        if let Some(g) = p.grad_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    scale
}
