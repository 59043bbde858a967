use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use vid_core::data::{
    generate_sprites, load_vidd, split_train_val, Dataset, Normalizer, SampleBatch, SpriteMask,
};
use vid_core::nn::{build_cnn, build_mlp_with_dropout, Checkpoint, Network};
use vid_core::train::{scaled_epochs, subsample_per_class, train_student, EpochRecord, RunResult, TeacherTargets, TransferData};
use vid_core::transfer::{build_regressor, KdTerm, MsePair, RegressorKind, TransferObjective, TransferPair};

use crate::config::{Component, DataSource, DatasetConfig, ExperimentConfig, Method, StudentConfig};
use crate::error::{CliError, Result};

/// Dataset splits shared by every run of an experiment.
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
    pub test_masks: Option<Vec<SpriteMask>>,
    pub normalizer: Normalizer,
    pub val_fraction: f64,
}

fn load_source(src: &DataSource) -> Result<(Dataset, Option<Vec<SpriteMask>>)> {
    match src {
        DataSource::Sprites(p) => {
            let (ds, masks) = generate_sprites(p)?;
            Ok((ds, Some(masks)))
        }
        DataSource::Vidd(path) => {
            if !path.exists() {
                return Err(CliError::MissingArtifact(path.clone()));
            }
            Ok((load_vidd(path)?, None))
        }
    }
}

impl Prepared {
    pub fn new(cfg: &DatasetConfig) -> Result<Self> {
        let (full, _) = load_source(&cfg.train)?;
        let split = split_train_val(&full, cfg.val_fraction, cfg.split_seed)?;
        let train = full.subset(&split.train)?;
        let val = full.subset(&split.val)?;
        let (test, test_masks) = match &cfg.test {
            Some(src) => {
                let (ds, masks) = load_source(src)?;
                if ds.shape != full.shape || ds.num_classes != full.num_classes {
                    return Err(CliError::config("/dataset/test", "test set shape or class count differs from training set"));
                }
                (Some(ds), masks)
            }
            None => (None, None),
        };
        let normalizer = Normalizer::fit(&train)?;
        Ok(Prepared { train, val, test, test_masks, normalizer, val_fraction: cfg.val_fraction })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.train.shape
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    /// Training and validation sets for one run. With `per_class` set, both
    /// are stratified subsamples drawn with `seed`; validation keeps the
    /// configured fraction of the subsample size.
    pub fn cell(&self, per_class: Option<usize>, seed: u64) -> Result<(SampleBatch, SampleBatch)> {
        match per_class {
            None => Ok((self.normalizer.apply(&self.train)?, self.normalizer.apply(&self.val)?)),
            Some(m) => {
                let sub = subsample_per_class(&self.train, m, seed)?;
                let m_val = ((self.val_fraction * m as f64).floor() as usize).max(1);
                let val = subsample_per_class(&self.val, m_val, seed)?;
                Ok((self.normalizer.apply(&sub)?, self.normalizer.apply(&val)?))
            }
        }
    }

    pub fn test_batch(&self) -> Result<Option<SampleBatch>> {
        Ok(self.test.as_ref().map(|t| self.normalizer.apply(t)).transpose()?)
    }
}

pub fn build_teacher(cfg: &ExperimentConfig, data: &Prepared) -> Result<Network> {
    let t = cfg.teacher()?;
    build_cnn(&t.channels, data.num_classes(), &data.input_shape()).map_err(|e| CliError::config("/teacher", e.to_string()))
}

/// Builds the teacher and loads its checkpoint.
pub fn load_teacher(cfg: &ExperimentConfig, data: &Prepared) -> Result<Network> {
    let path = cfg.teacher_checkpoint()?;
    if !path.exists() {
        return Err(CliError::MissingArtifact(path));
    }
    let mut teacher = build_teacher(cfg, data)?;
    let ckpt = Checkpoint::load(&path)?;
    teacher.load_state(ckpt.entries(), "teacher.")?;
    teacher.set_frozen(true);
    Ok(teacher)
}

pub fn build_student(cfg: &ExperimentConfig, data: &Prepared) -> Result<Network> {
    let shape = data.input_shape();
    let net = match cfg.student()? {
        StudentConfig::Mlp { hidden, dropout } => build_mlp_with_dropout(&shape, *hidden, data.num_classes(), *dropout),
        StudentConfig::Cnn { channels } => build_cnn(channels, data.num_classes(), &shape),
    };
    net.map_err(|e| CliError::config("/student", e.to_string()))
}

/// Weights for one run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub lambda1: f64,
    pub lambda2: f64,
}

fn regressor_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(1 + k as u64)
}

/// Assembles the objective of `method`, checking every referenced tap
/// against the built networks.
pub fn build_objective(
    cfg: &ExperimentConfig,
    method: &Method,
    teacher: Option<&Network>,
    student: &Network,
    weights: Weights,
    seed: u64,
) -> Result<TransferObjective> {
    let mut obj = TransferObjective::task_only(weights.lambda1);
    obj.lambda2 = if method.is_kd_only() || method.is_none() { 0.0 } else { weights.lambda2 };
    let Some(teacher) = teacher else {
        if method.needs_teacher() {
            return Err(CliError::config("/teacher", format!("method {method} needs a teacher")));
        }
        return Ok(obj);
    };
    let tap = |net: &Network, name: &str, pointer: String| -> Result<Vec<usize>> {
        match net.tap_shape(name) {
            Ok(s) => Ok(s.to_vec()),
            Err(_) if name == "logits" => Ok(net.output_shape().to_vec()),
            Err(_) => Err(CliError::config(pointer, format!("no tap named `{name}`"))),
        }
    };
    let mut k = 0;
    for c in method.components() {
        match c {
            Component::VidI | Component::Fitnet => {
                for (i, p) in cfg.pairs.iter().enumerate() {
                    let t_shape = tap(teacher, &p.teacher, format!("/pairs/{i}/teacher"))?;
                    let s_shape = tap(student, &p.student, format!("/pairs/{i}/student"))?;
                    let q = build_regressor(p.regressor, &s_shape, &t_shape, regressor_seed(seed, k))
                        .map_err(|e| CliError::config(format!("/pairs/{i}/regressor"), e.to_string()))?;
                    k += 1;
                    if c == Component::VidI {
                        let mut pair = TransferPair::new(p.teacher.clone(), p.student.clone(), q);
                        pair.weight = p.weight;
                        obj.pairs.push(pair);
                    } else {
                        obj.mse_pairs.push(MsePair {
                            teacher_tap: p.teacher.clone(),
                            student_tap: p.student.clone(),
                            adaptor: Some(q.mean_net),
                        });
                    }
                }
            }
            Component::VidLp => {
                let t_shape = tap(teacher, "logits", "/teacher".into())?;
                let s_shape = tap(student, "penultimate", "/student".into())?;
                let q = build_regressor(RegressorKind::LinearLogit, &s_shape, &t_shape, regressor_seed(seed, k))?;
                k += 1;
                obj.pairs.push(TransferPair::new("logits", "penultimate", q));
            }
            Component::LogitMse | Component::LinearLogitMse => {
                let t_shape = tap(teacher, "logits", "/teacher".into())?;
                let s_shape = tap(student, "logits", "/student".into())?;
                let adaptor = if c == Component::LinearLogitMse {
                    let q = build_regressor(RegressorKind::LinearLogit, &s_shape, &t_shape, regressor_seed(seed, k))?;
                    k += 1;
                    Some(q.mean_net)
                } else if s_shape != t_shape {
                    return Err(CliError::config("/method", "logit matching needs equal logit shapes"));
                } else {
                    None
                };
                obj.mse_pairs.push(MsePair { teacher_tap: "logits".into(), student_tap: "logits".into(), adaptor });
            }
            Component::Kd => {
                let weight = if method.is_kd_only() { weights.lambda2 } else { cfg.kd.weight };
                obj.kd = Some(KdTerm { temperature: cfg.kd.temperature, weight });
            }
        }
    }
    obj.validate()?;
    Ok(obj)
}

/// One (method, data size, seed, weights) training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub per_class: Option<usize>,
    pub seed: u64,
    pub weights: Weights,
}

impl Cell {
    pub fn size_label(&self) -> String {
        size_label(self.per_class)
    }

    pub fn dir(&self, root: &Path) -> std::path::PathBuf {
        root.join("runs").join(self.method.to_string()).join(self.size_label()).join(format!("seed{}", self.seed))
    }
}

pub fn size_label(per_class: Option<usize>) -> String {
    per_class.map_or_else(|| "full".to_string(), |m| format!("m{m}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    pub per_class: Option<usize>,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epochs: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: Option<f64>,
    pub best_epoch: usize,
}

/// Everything a run needs besides its cell.
pub struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub data: &'a Prepared,
    pub teacher: Option<&'a Network>,
    pub test: Option<&'a SampleBatch>,
}

pub struct CellOutput {
    pub result: CellResult,
    pub run: RunResult,
    pub student: Network,
    pub objective: TransferObjective,
    pub history: Vec<EpochRecord>,
}

pub fn run_cell(ctx: &Context<'_>, cell: &Cell) -> Result<CellOutput> {
    let cfg = ctx.cfg;
    let base = cfg.train()?;
    let (train, val) = ctx.data.cell(cell.per_class, cell.seed)?;
    let mut student = build_student(cfg, ctx.data)?;
    student.init_params(cell.seed);
    let mut objective = build_objective(cfg, &cell.method, ctx.teacher, &student, cell.weights, cell.seed)?;
    let targets = match ctx.teacher {
        Some(t) if objective.needs_teacher() => Some(TeacherTargets::for_objective(t, &train.images, &objective)?),
        _ => None,
    };
    let mut tc = base.clone();
    tc.seed = cell.seed;
    tc.lambda1 = cell.weights.lambda1;
    tc.lambda2 = cell.weights.lambda2;
    if cell.per_class.is_some() && cfg.scale_epochs {
        tc.epochs = scaled_epochs(base.epochs, ctx.data.train.len(), train.len(), base.batch_size);
    }
    let mut history = Vec::new();
    let data = TransferData { train: &train, val: &val, test: ctx.test };
    let run = train_student(&mut student, &mut objective, targets.as_ref(), data, &tc, &mut |e| history.push(e.clone()))?;
    let result = CellResult {
        method: cell.method.to_string(),
        per_class: cell.per_class,
        seed: cell.seed,
        lambda1: cell.weights.lambda1,
        lambda2: cell.weights.lambda2,
        epochs: tc.epochs,
        train_acc: run.train_accuracy,
        val_acc: run.val_accuracy,
        test_acc: run.test_accuracy,
        best_epoch: run.best_epoch,
    };
    Ok(CellOutput { result, run, student, objective, history })
}

/// Maps `f` over `items` on up to `threads` worker threads, keeping the
/// input order in the output.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("worker panicked").into_iter().map(|r| r.expect("every slot filled")).collect()
}
