use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use vid_core::evalviz::{
    activation_magnitude_map, background_foreground_means, evaluate_accuracy, loglik_map, mi_bound_bench, render_heatmap,
    variance_spectrum, write_pgm, write_spectrum_csv, Interpolation, MiEstimate,
};
use vid_core::nn::{Checkpoint, Dtype, Network};
use vid_core::train::{grid_cells, pick_best, train_student, write_grid_csv, GridCell, GridRow, TransferData};
use vid_core::transfer::{Layout, TransferObjective};
use vid_core::Tensor;

use crate::config::{Component, ExperimentConfig, Method};
use crate::error::{CliError, Result};
use crate::experiment::{
    build_objective, build_student, build_teacher, load_teacher, parallel_map, run_cell, size_label, Cell, CellOutput,
    CellResult, Context, Prepared, Weights,
};

/// Options shared by every command.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { out: None, seed: None, threads: 1 }
    }
}

/// Applies command-line overrides.
pub fn resolve(mut cfg: ExperimentConfig, opts: &RunOptions) -> Result<ExperimentConfig> {
    if let Some(out) = &opts.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = opts.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub artifacts: Vec<PathBuf>,
    pub wall_clock_seconds: f64,
    pub results: serde_json::Value,
}

struct Outputs {
    root: PathBuf,
    artifacts: Vec<PathBuf>,
}

impl Outputs {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(Outputs { root: root.to_path_buf(), artifacts: Vec::new() })
    }

    fn path(&mut self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        self.artifacts.push(p.clone());
        Ok(p)
    }

    fn write(&mut self, rel: impl AsRef<Path>, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(rel)?;
        fs::write(&p, bytes).map_err(|e| io_err(&p, e))?;
        Ok(p)
    }

    fn json<T: Serialize>(&mut self, rel: impl AsRef<Path>, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(vid_core::Error::from)?;
        text.push('\n');
        self.write(rel, text)
    }

    fn finish<T: Serialize>(mut self, command: &str, cfg: &ExperimentConfig, started: Instant, results: &T) -> Result<RunManifest> {
        self.write("config.resolved.json", cfg.to_json())?;
        let manifest = RunManifest {
            command: command.to_string(),
            config_hash: cfg.content_hash(),
            config: cfg.clone(),
            artifacts: self.artifacts.clone(),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            results: serde_json::to_value(results).map_err(vid_core::Error::from)?,
        };
        self.json(format!("manifest-{command}.json"), &manifest)?;
        Ok(manifest)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(vid_core::Error::Io { path: path.to_path_buf(), source: e })
}

fn jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TeacherReport {
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: Option<f64>,
    pub best_epoch: usize,
    pub checkpoint: PathBuf,
}

pub fn train_teacher(cfg: &ExperimentConfig) -> Result<TeacherReport> {
    let started = Instant::now();
    let tcfg = cfg.teacher()?;
    let data = Prepared::new(cfg.dataset()?)?;
    let mut out = Outputs::new(&cfg.output_dir)?;
    let mut teacher = build_teacher(cfg, &data)?;
    teacher.init_params(tcfg.init_seed);
    let (train, val) = data.cell(None, 0)?;
    let test = data.test_batch()?;
    let mut objective = TransferObjective::task_only(1.0);
    let mut history = Vec::new();
    let run = train_student(
        &mut teacher,
        &mut objective,
        None,
        TransferData { train: &train, val: &val, test: test.as_ref() },
        &tcfg.train,
        &mut |e| {
            eprintln!("teacher epoch {} loss {:.4} val {:.4}", e.epoch, e.total, e.val_accuracy);
            history.push(e.clone());
        },
    )?;
    let mut ckpt = Checkpoint::new();
    ckpt.extend_prefixed("teacher.", teacher.state());
    let path = cfg.teacher_checkpoint()?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    ckpt.save(&path, Dtype::F64)?;
    out.artifacts.push(path.clone());
    out.write("teacher/metrics.jsonl", jsonl(&history))?;
    let report = TeacherReport {
        train_acc: run.train_accuracy,
        val_acc: run.val_accuracy,
        test_acc: run.test_accuracy,
        best_epoch: run.best_epoch,
        checkpoint: path,
    };
    out.json("teacher/result.json", &report)?;
    out.finish("train-teacher", cfg, started, &report)?;
    Ok(report)
}

fn sizes(cfg: &ExperimentConfig) -> Vec<Option<usize>> {
    if cfg.per_class.is_empty() {
        vec![None]
    } else {
        cfg.per_class.iter().map(|&m| Some(m)).collect()
    }
}

/// Grid cells that differ in effect for `method`: `lambda2` is dropped for
/// the plain student.
fn method_cells(cfg: &ExperimentConfig, method: &Method) -> Option<Vec<GridCell>> {
    let g = cfg.grid.as_ref()?;
    let l2: Vec<f64> = if method.uses_lambda2() { g.lambda2.clone() } else { vec![0.0] };
    Some(grid_cells(&g.lambda1, &l2))
}

fn default_weights(cfg: &ExperimentConfig, method: &Method) -> Result<Weights> {
    let t = cfg.train()?;
    let lambda2 = if method.uses_lambda2() { t.lambda2 } else { 0.0 };
    Ok(Weights { lambda1: t.lambda1, lambda2 })
}

fn row_of(r: &CellResult) -> GridRow {
    GridRow { lambda1: r.lambda1, lambda2: r.lambda2, seed: r.seed, val_acc: r.val_acc, test_acc: r.test_acc.unwrap_or(f64::NAN) }
}

fn save_cell(out: &mut Outputs, cell: &Cell, o: &CellOutput) -> Result<()> {
    let dir = cell.dir(Path::new(""));
    out.write(dir.join("metrics.jsonl"), jsonl(&o.history))?;
    out.json(dir.join("result.json"), &o.result)?;
    let best = out.path(dir.join("student.ckpt"))?;
    o.run.best.save(&best, Dtype::F64)?;
    let initial = out.path(dir.join("initial.ckpt"))?;
    o.run.initial.save(&initial, Dtype::F64)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub per_class: Option<usize>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seeds: Vec<u64>,
    pub test_mean: Option<f64>,
    pub test_sd: Option<f64>,
    pub val_mean: f64,
    pub val_sd: f64,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(results: &[CellResult]) -> SummaryRow {
    let first = &results[0];
    let (val_mean, val_sd) = mean_sd(&results.iter().map(|r| r.val_acc).collect::<Vec<_>>());
    let tests: Option<Vec<f64>> = results.iter().map(|r| r.test_acc).collect();
    let (test_mean, test_sd) = match tests {
        Some(t) => {
            let (m, s) = mean_sd(&t);
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    SummaryRow {
        method: first.method.clone(),
        per_class: first.per_class,
        lambda1: first.lambda1,
        lambda2: first.lambda2,
        seeds: results.iter().map(|r| r.seed).collect(),
        test_mean,
        test_sd,
        val_mean,
        val_sd,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

fn summary_csv(rows: &[SummaryRow], hash: &str) -> String {
    let mut s = String::from("method,per_class,lambda1,lambda2,seeds,test_mean,test_sd,val_mean,val_sd,config_hash\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.per_class.map_or_else(|| "full".into(), |m| m.to_string()),
            r.lambda1,
            r.lambda2,
            seeds.join(";"),
            fmt_opt(r.test_mean),
            fmt_opt(r.test_sd),
            r.val_mean,
            r.val_sd,
            hash,
        ));
    }
    s
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistillReport {
    pub summary: Vec<SummaryRow>,
    pub runs: Vec<CellResult>,
    pub selections: BTreeMap<String, GridCell>,
}

impl DistillReport {
    pub fn row(&self, method: &str, per_class: Option<usize>) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.method == method && r.per_class == per_class)
    }
}

fn selection_key(method: &Method, per_class: Option<usize>) -> String {
    format!("{method}/{}", size_label(per_class))
}

fn log_cell(r: &CellResult) {
    eprintln!(
        "{} {} seed {} l1 {} l2 {}: val {:.4} test {}",
        r.method,
        size_label(r.per_class),
        r.seed,
        r.lambda1,
        r.lambda2,
        r.val_acc,
        r.test_acc.map_or_else(|| "-".into(), |t| format!("{t:.4}"))
    );
}

/// Trains every (method, size, seed) cell. With a grid configured, the
/// weights of each (method, size) are chosen on the first seed's
/// validation accuracy and reused for the other seeds.
pub fn distill(cfg: &ExperimentConfig, threads: usize) -> Result<DistillReport> {
    let started = Instant::now();
    cfg.train()?;
    cfg.student()?;
    let data = Prepared::new(cfg.dataset()?)?;
    let needs_teacher = cfg.method.0.iter().any(Method::needs_teacher);
    let teacher = if needs_teacher { Some(load_teacher(cfg, &data)?) } else { None };
    let test = data.test_batch()?;
    let ctx = Context { cfg, data: &data, teacher: teacher.as_ref(), test: test.as_ref() };
    let mut out = Outputs::new(&cfg.output_dir)?;
    let hash = cfg.content_hash();

    let mut runs = Vec::new();
    let mut summary = Vec::new();
    let mut selections = BTreeMap::new();
    for per_class in sizes(cfg) {
        for method in &cfg.method.0 {
            let first_seed = cfg.seeds[0];
            let mut done: Vec<(Cell, CellOutput)> = Vec::new();
            let weights = match method_cells(cfg, method) {
                Some(cells) => {
                    let jobs: Vec<Cell> = cells
                        .iter()
                        .map(|c| Cell {
                            method: method.clone(),
                            per_class,
                            seed: first_seed,
                            weights: Weights { lambda1: c.lambda1, lambda2: c.lambda2 },
                        })
                        .collect();
                    let outputs = parallel_map(&jobs, threads, |c| run_cell(&ctx, c))?;
                    let rows: Vec<GridRow> = outputs.iter().map(|o| row_of(&o.result)).collect();
                    outputs.iter().for_each(|o| log_cell(&o.result));
                    let best = pick_best(&rows).expect("non-empty grid");
                    let csv = out.path(format!("grid/{}_{}.csv", method, size_label(per_class)))?;
                    write_grid_csv(&rows, &csv)?;
                    selections.insert(selection_key(method, per_class), best);
                    let chosen = Weights { lambda1: best.lambda1, lambda2: best.lambda2 };
                    if let Some(pos) = jobs.iter().position(|c| c.weights == chosen) {
                        let o = outputs.into_iter().nth(pos).expect("index in range");
                        done.push((jobs[pos].clone(), o));
                    }
                    chosen
                }
                None => default_weights(cfg, method)?,
            };
            let jobs: Vec<Cell> = cfg
                .seeds
                .iter()
                .filter(|&&s| !done.iter().any(|(c, _)| c.seed == s))
                .map(|&seed| Cell { method: method.clone(), per_class, seed, weights })
                .collect();
            let outputs = parallel_map(&jobs, threads, |c| run_cell(&ctx, c))?;
            done.extend(jobs.into_iter().zip(outputs));
            done.sort_by_key(|(c, _)| cfg.seeds.iter().position(|&s| s == c.seed));
            let mut results = Vec::new();
            for (cell, o) in &done {
                log_cell(&o.result);
                save_cell(&mut out, cell, o)?;
                results.push(o.result.clone());
            }
            summary.push(summarize(&results));
            runs.extend(results);
        }
    }
    out.write("summary.csv", summary_csv(&summary, &hash))?;
    let report = DistillReport { summary, runs, selections };
    out.json("distill.json", &report)?;
    out.finish("distill", cfg, started, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridReport {
    pub tables: BTreeMap<String, Vec<GridRow>>,
    pub selections: BTreeMap<String, GridCell>,
}

/// Runs every grid cell for every seed and selects on mean validation
/// accuracy.
pub fn grid(cfg: &ExperimentConfig, threads: usize) -> Result<GridReport> {
    let started = Instant::now();
    cfg.train()?;
    cfg.student()?;
    if cfg.grid.is_none() {
        return Err(CliError::config("/grid", "section required by this command"));
    }
    let data = Prepared::new(cfg.dataset()?)?;
    let needs_teacher = cfg.method.0.iter().any(Method::needs_teacher);
    let teacher = if needs_teacher { Some(load_teacher(cfg, &data)?) } else { None };
    let test = data.test_batch()?;
    let ctx = Context { cfg, data: &data, teacher: teacher.as_ref(), test: test.as_ref() };
    let mut out = Outputs::new(&cfg.output_dir)?;
    let mut tables = BTreeMap::new();
    let mut selections = BTreeMap::new();
    for per_class in sizes(cfg) {
        for method in &cfg.method.0 {
            let cells = method_cells(cfg, method).expect("grid present");
            let jobs: Vec<Cell> = cells
                .iter()
                .flat_map(|c| {
                    cfg.seeds.iter().map(move |&seed| Cell {
                        method: method.clone(),
                        per_class,
                        seed,
                        weights: Weights { lambda1: c.lambda1, lambda2: c.lambda2 },
                    })
                })
                .collect();
            let outputs = parallel_map(&jobs, threads, |c| run_cell(&ctx, c).map(|o| o.result))?;
            outputs.iter().for_each(log_cell);
            let rows: Vec<GridRow> = outputs.iter().map(row_of).collect();
            let means: Vec<GridRow> = cells
                .iter()
                .map(|c| {
                    let accs: Vec<f64> =
                        rows.iter().filter(|r| r.lambda1 == c.lambda1 && r.lambda2 == c.lambda2).map(|r| r.val_acc).collect();
                    GridRow { lambda1: c.lambda1, lambda2: c.lambda2, seed: 0, val_acc: mean_sd(&accs).0, test_acc: 0.0 }
                })
                .collect();
            let key = selection_key(method, per_class);
            let csv = out.path(format!("grid/{}_{}.csv", method, size_label(per_class)))?;
            write_grid_csv(&rows, &csv)?;
            selections.insert(key.clone(), pick_best(&means).expect("non-empty grid"));
            tables.insert(key, rows);
        }
    }
    let report = GridReport { tables, selections };
    out.json("grid.json", &report)?;
    out.finish("grid", cfg, started, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub network: String,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: Option<f64>,
}

/// Rebuilds the network stored in `checkpoint` (a teacher or a distilled
/// student); defaults to the teacher checkpoint.
pub fn eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let started = Instant::now();
    let data = Prepared::new(cfg.dataset()?)?;
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => cfg.teacher_checkpoint()?,
    };
    let ckpt = load_checkpoint(&path)?;
    let (network, net) = if ckpt.entries().keys().any(|k| k.starts_with("student.")) {
        let mut net = build_student(cfg, &data)?;
        net.load_state(ckpt.entries(), "student.")?;
        ("student", net)
    } else {
        let mut net = build_teacher(cfg, &data)?;
        net.load_state(ckpt.entries(), "teacher.")?;
        ("teacher", net)
    };
    let (train, val) = data.cell(None, 0)?;
    let test = data.test_batch()?;
    let report = EvalReport {
        network: network.into(),
        train_acc: evaluate_accuracy(&net, &train)?,
        val_acc: evaluate_accuracy(&net, &val)?,
        test_acc: test.as_ref().map(|t| evaluate_accuracy(&net, t)).transpose()?,
    };
    let mut out = Outputs::new(&cfg.output_dir)?;
    out.json("eval.json", &report)?;
    out.finish("eval", cfg, started, &report)?;
    Ok(report)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(CliError::MissingArtifact(path.to_path_buf()));
    }
    Ok(Checkpoint::load(path)?)
}

/// The first configured method with variational pairs.
fn variational_method(cfg: &ExperimentConfig) -> Result<Method> {
    cfg.method
        .0
        .iter()
        .find(|m| m.has(Component::VidI) || m.has(Component::VidLp))
        .cloned()
        .ok_or_else(|| CliError::config("/method", "no configured method has variational pairs"))
}

/// Student, objective and teacher restored from a distillation checkpoint.
pub struct Restored {
    pub data: Prepared,
    pub teacher: Network,
    pub student: Network,
    pub objective: TransferObjective,
}

pub fn restore(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Restored> {
    let data = Prepared::new(cfg.dataset()?)?;
    let teacher = load_teacher(cfg, &data)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let method = variational_method(cfg)?;
    let mut student = build_student(cfg, &data)?;
    student.load_state(ckpt.entries(), "student.")?;
    let t = cfg.train()?;
    let mut objective =
        build_objective(cfg, &method, Some(&teacher), &student, Weights { lambda1: t.lambda1, lambda2: t.lambda2 }, 0)?;
    objective.load_state(ckpt.entries(), "objective.")?;
    Ok(Restored { data, teacher, student, objective })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapEntry {
    pub image: usize,
    pub pair: usize,
    pub teacher_tap: String,
    pub mean_loglik: f64,
    pub background_mean: Option<f64>,
    pub foreground_mean: Option<f64>,
    pub heatmap: PathBuf,
    pub magnitude: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeatmapReport {
    pub entries: Vec<HeatmapEntry>,
    /// Share of images whose background is at least as likely as the
    /// foreground, when sprite masks are available.
    pub background_not_below_foreground: Option<f64>,
}

/// Log-likelihood and activation-magnitude heatmaps for test images (or
/// validation images when no test set is configured).
pub fn heatmap(cfg: &ExperimentConfig, checkpoint: &Path, images: &[usize]) -> Result<HeatmapReport> {
    let started = Instant::now();
    if images.is_empty() {
        return Err(CliError::Usage("no image indices given".into()));
    }
    let r = restore(cfg, checkpoint)?;
    let (pool, masks) = match (&r.data.test, &r.data.test_masks) {
        (Some(t), m) => (r.data.normalizer.apply(t)?, m.clone()),
        (None, _) => (r.data.normalizer.apply(&r.data.val)?, None),
    };
    let [_, h, w] = r.data.input_shape();
    let mut out = Outputs::new(&cfg.output_dir)?;
    let mut entries = Vec::new();
    let mut votes = Vec::new();
    for &i in images {
        if i >= pool.len() {
            return Err(CliError::Usage(format!("image index {i} out of range for {} images", pool.len())));
        }
        let x = pool.images.select_rows(&[i])?;
        let (_, t_taps) = r.teacher.eval(&x)?;
        let (_, s_taps) = r.student.eval(&x)?;
        let mut bg_fg = Vec::new();
        for (k, pair) in r.objective.pairs.iter().enumerate() {
            if pair.q.layout != Layout::Conv {
                continue;
            }
            let t = tap(&t_taps, &pair.teacher_tap)?;
            let s = tap(&s_taps, &pair.student_tap)?;
            let map = loglik_map(&pair.q, t, s)?;
            let hm = out.path(format!("heatmaps/img{i}_pair{k}.pgm"))?;
            write_pgm(&render_heatmap(&map, h, w, Interpolation::Bilinear), &hm)?;
            let mag = out.path(format!("heatmaps/img{i}_pair{k}_magnitude.pgm"))?;
            write_pgm(&render_heatmap(&activation_magnitude_map(t)?, h, w, Interpolation::Bilinear), &mag)?;
            let (bg, fg) = match &masks {
                Some(m) => {
                    let (bg, fg) = background_foreground_means(&map, &m[i]);
                    bg_fg.push(bg >= fg);
                    (Some(bg), Some(fg))
                }
                None => (None, None),
            };
            entries.push(HeatmapEntry {
                image: i,
                pair: k,
                teacher_tap: pair.teacher_tap.clone(),
                mean_loglik: map.mean(),
                background_mean: bg,
                foreground_mean: fg,
                heatmap: hm,
                magnitude: mag,
            });
        }
        if !bg_fg.is_empty() {
            votes.push(bg_fg.iter().all(|&v| v));
        }
    }
    if entries.is_empty() {
        return Err(CliError::config("/pairs", "no convolutional variational pair to draw"));
    }
    let share = (!votes.is_empty()).then(|| votes.iter().filter(|&&v| v).count() as f64 / votes.len() as f64);
    let report = HeatmapReport { entries, background_not_below_foreground: share };
    out.json("heatmaps/report.json", &report)?;
    out.finish("heatmap", cfg, started, &report)?;
    Ok(report)
}

fn tap<'a>(taps: &'a BTreeMap<String, Tensor>, name: &str) -> Result<&'a Tensor> {
    taps.get(name).ok_or_else(|| CliError::Core(vid_core::Error::MissingTap(name.to_string())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEntry {
    pub pair: String,
    pub sigma_sq: Vec<f64>,
    pub min: f64,
    pub coefficient_of_variation: f64,
    pub csv: PathBuf,
}

pub fn variances(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<SpectrumEntry>> {
    let started = Instant::now();
    let r = restore(cfg, checkpoint)?;
    let mut out = Outputs::new(&cfg.output_dir)?;
    let mut entries = Vec::new();
    for (k, pair) in r.objective.pairs.iter().enumerate() {
        let spec = variance_spectrum(format!("{}:{}", pair.teacher_tap, pair.student_tap), &pair.q);
        let csv = out.path(format!("variances/pair{k}.csv"))?;
        write_spectrum_csv(&spec, &csv)?;
        entries.push(SpectrumEntry {
            pair: spec.pair.clone(),
            min: spec.sigma_sq.iter().copied().fold(f64::INFINITY, f64::min),
            coefficient_of_variation: spec.coefficient_of_variation(),
            sigma_sq: spec.sigma_sq,
            csv,
        });
    }
    out.json("variances/report.json", &entries)?;
    out.finish("variances", cfg, started, &entries)?;
    Ok(entries)
}

pub fn mi_bench(cfg: &ExperimentConfig) -> Result<Vec<MiEstimate>> {
    let started = Instant::now();
    let section = cfg.mi_bench()?;
    let bench = section.bench_config();
    let estimates = section.rho.iter().map(|&rho| mi_bound_bench(rho, &bench)).collect::<vid_core::Result<Vec<_>>>()?;
    let mut out = Outputs::new(&cfg.output_dir)?;
    out.json("mi_bench.json", &estimates)?;
    out.finish("mi-bench", cfg, started, &estimates)?;
    Ok(estimates)
}
