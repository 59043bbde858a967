use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gaussian::{QPass, VariationalGaussian};
use super::losses::{kd_loss, mse_match_loss};
use crate::error::{Error, Result};
use crate::nn::{Forward, Mode, Network, TapActivations};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// One regularized (teacher tap, student tap) pair.
#[derive(Clone, Debug)]
pub struct TransferPair {
    pub teacher_tap: String,
    pub student_tap: String,
    pub q: VariationalGaussian,
    /// Overrides the shared transfer weight for this pair.
    pub weight: Option<f64>,
}

impl TransferPair {
    pub fn new(teacher_tap: impl Into<String>, student_tap: impl Into<String>, q: VariationalGaussian) -> Self {
        TransferPair { teacher_tap: teacher_tap.into(), student_tap: student_tap.into(), q, weight: None }
    }

    /// Number of dimensions of the teacher activation.
    pub fn normalizer(&self) -> usize {
        self.q.target_size()
    }
}

/// Unit-variance matching pair; `adaptor: None` compares activations
/// directly.
#[derive(Clone, Debug)]
pub struct MsePair {
    pub teacher_tap: String,
    pub student_tap: String,
    pub adaptor: Option<Network>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdTerm {
    pub temperature: f64,
    pub weight: f64,
}

/// `lambda1 * task + sum_k (lambda2 / N_k) * NLL_k`, optionally with KD and
/// unit-variance matching terms.
#[derive(Clone, Debug)]
pub struct TransferObjective {
    pub lambda1: f64,
    pub lambda2: f64,
    pub pairs: Vec<TransferPair>,
    pub kd: Option<KdTerm>,
    pub mse_pairs: Vec<MsePair>,
}

/// Scalar breakdown of one evaluation. `per_pair_nll` holds each pair's
/// transfer term already divided by its `N_k` (VID pairs first, then
/// matching pairs).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub task: f64,
    pub per_pair_nll: Vec<f64>,
    pub kd_term: Option<f64>,
}

/// Tape handles from [`vid_loss`].
#[derive(Debug)]
pub struct VidLoss {
    pub total: Var,
    pub report: LossReport,
    /// Normalized transfer term per pair.
    pub pair_terms: Vec<Var>,
    q_passes: Vec<QPass>,
    adaptor_passes: Vec<Option<Forward>>,
}

impl TransferObjective {
    pub fn task_only(lambda1: f64) -> Self {
        TransferObjective { lambda1, lambda2: 0.0, pairs: Vec::new(), kd: None, mse_pairs: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0) || !self.lambda1.is_finite() {
            return Err(Error::Config(format!("lambda1 must be positive, got {}", self.lambda1)));
        }
        if !(self.lambda2 >= 0.0) || !self.lambda2.is_finite() {
            return Err(Error::Config(format!("lambda2 must be non-negative, got {}", self.lambda2)));
        }
        if !self.pairs.is_empty() && !self.mse_pairs.is_empty() {
            return Err(Error::Config("variational pairs and matching pairs cannot be combined in one run".into()));
        }
        if let Some(kd) = self.kd {
            if !(kd.temperature > 0.0) || !(kd.weight >= 0.0) {
                return Err(Error::Config(format!("invalid KD term {kd:?}")));
            }
        }
        for p in &self.pairs {
            if let Some(w) = p.weight {
                if !(w >= 0.0) {
                    return Err(Error::Config(format!("pair weight {w} must be non-negative")));
                }
            }
        }
        Ok(())
    }

    /// True when any term reads teacher activations.
    pub fn needs_teacher(&self) -> bool {
        !self.pairs.is_empty() || !self.mse_pairs.is_empty() || self.kd.is_some()
    }

    /// Trainable tensors of the mean networks, variances and adaptors.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for p in &mut self.pairs {
            out.extend(p.q.params_mut());
        }
        for m in &mut self.mse_pairs {
            if let Some(a) = &mut m.adaptor {
                out.extend(a.params_mut());
            }
        }
        out
    }

    /// Mean networks, variances and adaptors keyed `pair{k}.*` / `mse{k}.*`.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (k, p) in self.pairs.iter().enumerate() {
            out.extend(p.q.mean_net.state().into_iter().map(|(n, t)| (format!("pair{k}.{n}"), t)));
            let mut alpha = p.q.alpha.clone().with_requires_grad(false);
            alpha.clear_grad();
            out.push((format!("pair{k}.alpha"), alpha));
        }
        for (k, m) in self.mse_pairs.iter().enumerate() {
            if let Some(a) = &m.adaptor {
                out.extend(a.state().into_iter().map(|(n, t)| (format!("mse{k}.{n}"), t)));
            }
        }
        out
    }

    pub fn load_state(&mut self, entries: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (k, p) in self.pairs.iter_mut().enumerate() {
            p.q.mean_net.load_state(entries, &format!("{prefix}pair{k}."))?;
            let key = format!("{prefix}pair{k}.alpha");
            let src = entries.get(&key).ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))?;
            if src.shape() != p.q.alpha.shape() {
                return Err(Error::shape("load_state", format!("`{key}`: {:?} vs {:?}", src.shape(), p.q.alpha.shape())));
            }
            p.q.alpha.data_mut().copy_from_slice(src.data());
        }
        for (k, m) in self.mse_pairs.iter_mut().enumerate() {
            if let Some(a) = &mut m.adaptor {
                a.load_state(entries, &format!("{prefix}mse{k}."))?;
            }
        }
        Ok(())
    }

    pub fn collect_grads(&mut self, loss: &VidLoss, grads: &Gradients) -> Result<()> {
        for (p, pass) in self.pairs.iter_mut().zip(&loss.q_passes) {
            p.q.collect_grads(pass, grads)?;
        }
        for (m, pass) in self.mse_pairs.iter_mut().zip(&loss.adaptor_passes) {
            if let (Some(a), Some(f)) = (&mut m.adaptor, pass) {
                a.collect_grads(f, grads)?;
            }
        }
        Ok(())
    }
}

fn check_pair_shapes(tape: &Tape, name: &str, t: Var, target: &[usize]) -> Result<()> {
    let shape = tape.shape(t);
    if shape.len() != target.len() + 1 || shape[1..] != *target {
        return Err(Error::shape(
            "vid_loss",
            format!("teacher tap `{name}` is {shape:?}, regressor produces [batch, {target:?}]"),
        ));
    }
    Ok(())
}

/// Student activation `name`; `logits` falls back to the network output
/// when the student has no tap of that name.
fn student_tap(taps: &TapActivations, name: &str, logits: Var) -> Result<Var> {
    match taps.get(name) {
        Err(_) if name == "logits" => Ok(logits),
        other => other,
    }
}

/// Composes the full objective on `tape`. Teacher activations must be
/// detached (recorded as constants).
#[allow(clippy::too_many_arguments)]
pub fn vid_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    task: Var,
    student_logits: Var,
    objective: &mut TransferObjective,
    teacher_taps: &TapActivations,
    student_taps: &TapActivations,
    mode: Mode,
    rng: &mut R,
) -> Result<VidLoss> {
    objective.validate()?;
    for (name, v) in teacher_taps.iter() {
        if tape.requires_grad(v) {
            return Err(Error::InvalidArgument(format!("teacher tap `{name}` is not detached")));
        }
    }
    let task_value = tape.item(task)?;
    let mut total = tape.scalar_mul(task, objective.lambda1)?;
    let mut report = LossReport { task: task_value, ..LossReport::default() };
    let mut pair_terms = Vec::new();
    let mut q_passes = Vec::new();
    let mut adaptor_passes = Vec::new();

    for pair in &mut objective.pairs {
        let t = teacher_taps.get(&pair.teacher_tap)?;
        let s = student_tap(student_taps, &pair.student_tap, student_logits)?;
        check_pair_shapes(tape, &pair.teacher_tap, t, pair.q.target_shape())?;
        let n_k = pair.normalizer() as f64;
        let pass = pair.q.nll(tape, t, s, mode, rng, false)?;
        let term = tape.scalar_mul(pass.nll, 1.0 / n_k)?;
        let weighted = tape.scalar_mul(term, pair.weight.unwrap_or(objective.lambda2))?;
        total = tape.add(total, weighted)?;
        report.per_pair_nll.push(tape.item(term)?);
        pair_terms.push(term);
        q_passes.push(pass);
    }

    for pair in &mut objective.mse_pairs {
        let t = teacher_taps.get(&pair.teacher_tap)?;
        let s = student_tap(student_taps, &pair.student_tap, student_logits)?;
        let (mu, fwd) = match &mut pair.adaptor {
            Some(a) => {
                let f = a.forward_with_taps(tape, s, mode, rng)?;
                (f.output, Some(f))
            }
            None => (s, None),
        };
        let term = mse_match_loss(tape, t, mu)?;
        let weighted = tape.scalar_mul(term, objective.lambda2)?;
        total = tape.add(total, weighted)?;
        report.per_pair_nll.push(tape.item(term)?);
        pair_terms.push(term);
        adaptor_passes.push(fwd);
    }

    if let Some(kd) = objective.kd {
        let t = teacher_taps.get("logits")?;
        let term = kd_loss(tape, t, student_logits, kd.temperature)?;
        report.kd_term = Some(tape.item(term)?);
        let weighted = tape.scalar_mul(term, kd.weight)?;
        total = tape.add(total, weighted)?;
    }

    report.total = tape.item(total)?;
    Ok(VidLoss { total, report, pair_terms, q_passes, adaptor_passes })
}
