use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_grad_norm, lr_at, sgd_step, OptimizerState, TrainConfig};
use crate::data::SampleBatch;
use crate::error::{Error, Result};
use crate::evalviz::evaluate_accuracy;
use crate::nn::{Checkpoint, Mode, Network, TapActivations};
use crate::tensor::{Tape, Tensor};
use crate::transfer::{cross_entropy, vid_loss, LossReport, TransferObjective};

const EVAL_CHUNK: usize = 256;

/// Train, validation and optional test splits, already normalized.
#[derive(Clone, Copy, Debug)]
pub struct TransferData<'a> {
    pub train: &'a SampleBatch,
    pub val: &'a SampleBatch,
    pub test: Option<&'a SampleBatch>,
}

/// Teacher activations over the whole training split, computed once in eval
/// mode and fed to the loss as constants.
#[derive(Clone, Debug, Default)]
pub struct TeacherTargets {
    taps: BTreeMap<String, Tensor>,
}

impl TeacherTargets {
    /// Captures `names` (tap names, or `logits` for the output) for every
    /// row of `images`.
    pub fn compute(teacher: &Network, images: &Tensor, names: &[String]) -> Result<Self> {
        let n = images.shape()[0];
        let mut parts: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let chunk = images.slice_rows(start, (start + EVAL_CHUNK).min(n))?;
            let (logits, taps) = teacher.eval(&chunk)?;
            for name in names {
                let t = if let Some(t) = taps.get(name) {
                    t
                } else if name == "logits" {
                    &logits
                } else {
                    return Err(Error::MissingTap(name.clone()));
                };
                let entry = parts.entry(name.clone()).or_insert_with(|| (t.shape()[1..].to_vec(), Vec::new()));
                entry.1.extend_from_slice(t.data());
            }
        }
        let mut taps = BTreeMap::new();
        for (name, (per, data)) in parts {
            let mut shape = vec![n];
            shape.extend(per);
            taps.insert(name, Tensor::new(shape, data)?);
        }
        Ok(TeacherTargets { taps })
    }

    /// Teacher taps an objective reads: every pair's teacher tap plus
    /// `logits` when KD is configured.
    pub fn for_objective(teacher: &Network, images: &Tensor, objective: &TransferObjective) -> Result<Self> {
        let mut names: Vec<String> = objective.pairs.iter().map(|p| p.teacher_tap.clone()).collect();
        names.extend(objective.mse_pairs.iter().map(|p| p.teacher_tap.clone()));
        if objective.kd.is_some() {
            names.push("logits".into());
        }
        names.sort();
        names.dedup();
        Self::compute(teacher, images, &names)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.taps.get(name)
    }

    fn bind(&self, tape: &mut Tape, rows: &[usize]) -> Result<TapActivations> {
        let mut out = TapActivations::new();
        for (name, t) in &self.taps {
            let v = tape.constant(&t.select_rows(rows)?)?;
            out.insert(name.clone(), v);
        }
        Ok(out)
    }
}

/// Batch-size weighted epoch averages of the loss report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub task: f64,
    pub per_pair_nll: Vec<f64>,
    pub kd_term: Option<f64>,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    /// Accuracies of the best-validation state, which is also left loaded
    /// in the student and objective.
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// `student.*` and `objective.*` entries of the best state.
    pub best: Checkpoint,
    /// The same entries before the first update.
    pub initial: Checkpoint,
}

fn snapshot(student: &Network, objective: &TransferObjective) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.extend_prefixed("student.", student.state());
    ck.extend_prefixed("objective.", objective.state());
    ck
}

struct Accumulator {
    count: usize,
    total: f64,
    task: f64,
    pairs: Vec<f64>,
    kd: Option<f64>,
}

impl Accumulator {
    fn new() -> Self {
        Accumulator { count: 0, total: 0.0, task: 0.0, pairs: Vec::new(), kd: None }
    }

    fn add(&mut self, r: &LossReport, n: usize) {
        let w = n as f64;
        self.count += n;
        self.total += w * r.total;
        self.task += w * r.task;
        self.pairs.resize(r.per_pair_nll.len(), 0.0);
        for (s, v) in self.pairs.iter_mut().zip(&r.per_pair_nll) {
            *s += w * v;
        }
        if let Some(k) = r.kd_term {
            *self.kd.get_or_insert(0.0) += w * k;
        }
    }

    fn finish(self, epoch: usize, val_accuracy: f64, lr: f64) -> EpochRecord {
        let n = self.count.max(1) as f64;
        EpochRecord {
            epoch,
            total: self.total / n,
            task: self.task / n,
            per_pair_nll: self.pairs.iter().map(|v| v / n).collect(),
            kd_term: self.kd.map(|v| v / n),
            val_accuracy,
            lr,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    student: &mut Network,
    objective: &mut TransferObjective,
    teacher: Option<&TeacherTargets>,
    data: &SampleBatch,
    rows: &[usize],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    let batch = data.select(rows)?;
    let mut tape = Tape::new();
    let x = tape.constant(&batch.images)?;
    let fwd = student.forward_with_taps(&mut tape, x, Mode::Train, rng)?;
    let task = cross_entropy(&mut tape, fwd.output, &batch.labels)?;
    let teacher_taps = match teacher {
        Some(t) => t.bind(&mut tape, rows)?,
        None => TapActivations::new(),
    };
    let loss = vid_loss(&mut tape, task, fwd.output, objective, &teacher_taps, &fwd.taps, Mode::Train, rng)?;
    let grads = tape.backward(loss.total)?;
    student.collect_grads(&fwd, &grads)?;
    objective.collect_grads(&loss, &grads)?;
    let mut params = student.params_mut();
    params.extend(objective.params_mut());
    clip_grad_norm(&mut params, cfg.grad_clip_norm);
    sgd_step(&mut params, state, cfg)?;
    Ok(loss.report)
}

/// Minimizes the objective over the student and the objective's own
/// parameters. Batch order is a per-epoch shuffle drawn from
/// `ChaCha8Rng::seed_from_u64(cfg.seed)`; stochastic layers draw from stream 1
/// of the same seed. `on_epoch` sees each record as it is produced.
pub fn train_student(
    student: &mut Network,
    objective: &mut TransferObjective,
    teacher: Option<&TeacherTargets>,
    data: TransferData<'_>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<RunResult> {
    cfg.validate()?;
    objective.validate()?;
    if objective.needs_teacher() && teacher.is_none() {
        return Err(Error::InvalidArgument("objective reads teacher activations but no teacher was given".into()));
    }
    if let Some(t) = teacher {
        if let Some((name, tap)) = t.taps.iter().find(|(_, tap)| tap.shape()[0] != data.train.len()) {
            return Err(Error::shape("train_student", format!("teacher tap `{name}` has {} rows", tap.shape()[0])));
        }
    }
    let n = data.train.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let mut state = OptimizerState::new(cfg.base_lr);
    let initial = snapshot(student, objective);
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        state.lr = lr_at(epoch, cfg);
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut order_rng);
        let mut acc = Accumulator::new();
        let wrap = |e: Error| Error::Epoch { epoch, source: Box::new(e) };
        for rows in order.chunks(cfg.batch_size) {
            let report = train_step(student, objective, teacher, data.train, rows, &mut state, cfg, &mut noise_rng)
                .map_err(wrap)?;
            acc.add(&report, rows.len());
        }
        let val = evaluate_accuracy(student, data.val).map_err(wrap)?;
        let record = acc.finish(epoch, val, state.lr);
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(b, _, _)| val > *b) {
            best = Some((val, epoch, snapshot(student, objective)));
        }
    }

    let (val_accuracy, best_epoch, best) = best.expect("at least one epoch");
    student.load_state(best.entries(), "student.")?;
    objective.load_state(best.entries(), "objective.")?;
    let train_accuracy = evaluate_accuracy(student, data.train)?;
    let test_accuracy = data.test.map(|t| evaluate_accuracy(student, t)).transpose()?;
    Ok(RunResult {
        seed: cfg.seed,
        train_accuracy,
        val_accuracy,
        test_accuracy,
        best_epoch,
        history,
        best,
        initial,
    })
}
