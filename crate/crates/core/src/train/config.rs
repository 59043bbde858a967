use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    #[serde(default = "default_decay")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_milestones")]
    pub decay_milestones: Vec<f64>,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_clip")]
    pub grad_clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    #[serde(default)]
    pub lambda2: f64,
}

fn default_decay() -> f64 {
    0.2
}

fn default_milestones() -> Vec<f64> {
    vec![0.3, 0.6, 0.8]
}

fn default_clip() -> f64 {
    100.0
}

fn default_lambda1() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            base_lr: 0.1,
            lr_decay_factor: default_decay(),
            decay_milestones: default_milestones(),
            weight_decay: 0.0,
            momentum: 0.0,
            grad_clip_norm: default_clip(),
            seed: 0,
            lambda1: default_lambda1(),
            lambda2: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad(format!("lr_decay_factor must be positive, got {}", self.lr_decay_factor));
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!("grad_clip_norm must be positive, got {}", self.grad_clip_norm));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        let mut prev = 0.0;
        for &m in &self.decay_milestones {
            if !(m > prev && m < 1.0) {
                return bad(format!("decay milestones must increase strictly within (0, 1): {:?}", self.decay_milestones));
            }
            prev = m;
        }
        if !(self.lambda1 > 0.0) || !(self.lambda2 >= 0.0) {
            return bad(format!("need lambda1 > 0 and lambda2 >= 0, got {} and {}", self.lambda1, self.lambda2));
        }
        Ok(())
    }

    /// Epoch indices at which the rate decays, `max(1, round(f * epochs))`.
    pub fn milestone_epochs(&self) -> Vec<usize> {
        self.decay_milestones.iter().map(|f| ((f * self.epochs as f64).round() as usize).max(1)).collect()
    }
}

/// `base_lr * factor^(milestones passed)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.milestone_epochs().iter().filter(|&&m| epoch >= m).count();
    cfg.base_lr * cfg.lr_decay_factor.powi(passed as i32)
}

/// Epoch count for a dataset of `len` examples that keeps the number of
/// optimizer steps close to `base_epochs` over `base_len` examples.
pub fn scaled_epochs(base_epochs: usize, base_len: usize, len: usize, batch_size: usize) -> usize {
    let steps = |n: usize| n.div_ceil(batch_size).max(1);
    let target = (base_epochs * steps(base_len)) as f64;
    ((target / steps(len) as f64).round() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig { epochs: 200, base_lr: 0.1, ..TrainConfig::default() };
        assert_eq!(lr_at(59, &cfg), 0.1);
        assert!((lr_at(60, &cfg) - 0.02).abs() < 1e-15);
        assert!((lr_at(199, &cfg) - 8e-4).abs() < 1e-15);
    }

    #[test]
    fn scaled_step_counts_stay_close() {
        for &(e, big, small, b) in &[(20usize, 4000usize, 100usize, 64usize), (30, 5000, 500, 32), (10, 800, 80, 16)] {
            let steps = |n: usize, ep: usize| (n.div_ceil(b) * ep) as f64;
            let scaled = scaled_epochs(e, big, small, b);
            let ratio = steps(small, scaled) / steps(big, e);
            assert!((ratio - 1.0).abs() <= 0.1, "{ratio}");
        }
    }

    #[test]
    fn validation_rejects_bad_milestones() {
        let cfg = TrainConfig { decay_milestones: vec![0.6, 0.3], ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { decay_milestones: vec![0.5, 1.0], ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
