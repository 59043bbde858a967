use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vid_core::data::SpriteParams;
use vid_core::evalviz::MiBenchConfig;
use vid_core::train::TrainConfig;
use vid_core::transfer::RegressorKind;

use crate::error::{CliError, Result};

/// One experiment: data, networks, the methods to compare, the schedule and
/// the seeds. Sections a command does not need may be omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub teacher: Option<TeacherConfig>,
    #[serde(default)]
    pub student: Option<StudentConfig>,
    #[serde(default)]
    pub method: MethodList,
    #[serde(default)]
    pub pairs: Vec<PairConfig>,
    #[serde(default)]
    pub kd: KdConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Examples per class for subsampled runs; empty means the full split.
    #[serde(default)]
    pub per_class: Vec<usize>,
    /// Keep the optimizer step count of a full-data run when subsampling.
    #[serde(default = "default_true")]
    pub scale_epochs: bool,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub mi_bench: Option<MiBenchSection>,
}

fn default_true() -> bool {
    true
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub train: DataSource,
    #[serde(default)]
    pub test: Option<DataSource>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Sprites(SpriteParams),
    Vidd(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub channels: Vec<usize>,
    #[serde(default)]
    pub init_seed: u64,
    pub train: TrainConfig,
    /// Defaults to `teacher.ckpt` inside the output directory.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StudentConfig {
    Mlp {
        hidden: usize,
        #[serde(default = "default_dropout")]
        dropout: f64,
    },
    Cnn {
        channels: Vec<usize>,
    },
}

fn default_dropout() -> f64 {
    vid_core::nn::DEFAULT_DROPOUT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    pub teacher: String,
    pub student: String,
    pub regressor: RegressorKind,
    /// Replaces the shared `lambda2` for this pair.
    #[serde(default)]
    pub weight: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_kd_weight")]
    pub weight: f64,
}

fn default_temperature() -> f64 {
    4.0
}

fn default_kd_weight() -> f64 {
    1.0
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig { temperature: default_temperature(), weight: default_kd_weight() }
    }
}

/// Candidate weights. For a method made only of `kd`, `lambda2` is the
/// distillation weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiBenchSection {
    pub rho: Vec<f64>,
    #[serde(default = "default_mi_samples")]
    pub n_train: usize,
    #[serde(default = "default_mi_samples")]
    pub n_eval: usize,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

fn default_mi_samples() -> usize {
    50_000
}

impl MiBenchSection {
    pub fn bench_config(&self) -> MiBenchConfig {
        let defaults = MiBenchConfig::default();
        MiBenchConfig { n_train: self.n_train, n_eval: self.n_eval, train: self.train.clone().unwrap_or(defaults.train) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    Kd,
    VidI,
    VidLp,
    Fitnet,
    LogitMse,
    LinearLogitMse,
}

impl Component {
    fn name(self) -> &'static str {
        match self {
            Component::VidI => "vid_i",
            Component::VidLp => "vid_lp",
            Component::Kd => "kd",
            Component::Fitnet => "fitnet",
            Component::LogitMse => "logit_mse",
            Component::LinearLogitMse => "linear_logit_mse",
        }
    }

    fn is_variational(self) -> bool {
        matches!(self, Component::VidI | Component::VidLp)
    }

    fn is_mse(self) -> bool {
        matches!(self, Component::Fitnet | Component::LogitMse | Component::LinearLogitMse)
    }
}

/// A transfer method: a set of regularizers added to the task loss.
/// The empty set is the plain student.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Method(BTreeSet<Component>);

impl Method {
    pub fn none() -> Self {
        Method::default()
    }

    pub fn has(&self, c: Component) -> bool {
        self.0.contains(&c)
    }

    pub fn components(&self) -> impl Iterator<Item = Component> + '_ {
        self.0.iter().copied()
    }

    pub fn is_none(&self) -> bool {
        self.0.is_empty()
    }

    pub fn needs_teacher(&self) -> bool {
        !self.0.is_empty()
    }

    /// Uses the configured tap pairs.
    pub fn uses_pairs(&self) -> bool {
        self.has(Component::VidI) || self.has(Component::Fitnet)
    }

    /// Only knowledge distillation, so `lambda2` weighs the KD term.
    pub fn is_kd_only(&self) -> bool {
        self.0.len() == 1 && self.has(Component::Kd)
    }

    /// Whether `lambda2` has any effect on the objective.
    pub fn uses_lambda2(&self) -> bool {
        !self.0.is_empty()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<&str> = self.0.iter().map(|c| c.name()).collect();
        f.write_str(&names.join("+"))
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "none" {
            return Ok(Method::none());
        }
        let all = [
            Component::VidI,
            Component::VidLp,
            Component::Kd,
            Component::Fitnet,
            Component::LogitMse,
            Component::LinearLogitMse,
        ];
        let mut set = BTreeSet::new();
        for part in s.split('+') {
            let c = all.iter().find(|c| c.name() == part).ok_or_else(|| format!("unknown method component `{part}`"))?;
            if !set.insert(*c) {
                return Err(format!("component `{part}` repeated"));
            }
        }
        if set.iter().any(|c| c.is_variational()) && set.iter().any(|c| c.is_mse()) {
            return Err(format!("`{s}` mixes variational and squared-error matching"));
        }
        Ok(Method(set))
    }
}

/// `method` accepts one name or a list of names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OneOrMany", into = "Vec<String>")]
pub struct MethodList(pub Vec<Method>);

impl Default for MethodList {
    fn default() -> Self {
        MethodList(vec![Method::none()])
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl TryFrom<OneOrMany> for MethodList {
    type Error = String;

    fn try_from(v: OneOrMany) -> Result<Self, String> {
        let names = match v {
            OneOrMany::One(s) => vec![s],
            OneOrMany::Many(v) => v,
        };
        if names.is_empty() {
            return Err("at least one method is required".into());
        }
        let methods = names.iter().map(|n| n.parse()).collect::<Result<Vec<Method>, _>>()?;
        let unique: BTreeSet<&Method> = methods.iter().collect();
        if unique.len() != methods.len() {
            return Err("methods must be distinct".into());
        }
        Ok(MethodList(methods))
    }
}

impl From<MethodList> for Vec<String> {
    fn from(m: MethodList) -> Self {
        m.0.iter().map(Method::to_string).collect()
    }
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => out.push_str("/?"),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

fn check(ok: bool, pointer: impl Into<String>, message: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::config(pointer, message))
    }
}

fn check_train(cfg: &TrainConfig, pointer: &str) -> Result<()> {
    cfg.validate().map_err(|e| CliError::config(pointer, e.to_string()))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig =
            serde_path_to_error::deserialize(de).map_err(|e| CliError::config(pointer_of(e.path()), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| CliError::MissingArtifact(path.to_path_buf()))?;
        Self::parse(&text)
    }

    /// Checks that do not need the networks built.
    pub fn validate(&self) -> Result<()> {
        check(!self.seeds.is_empty(), "/seeds", "at least one seed is required")?;
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        check(distinct.len() == self.seeds.len(), "/seeds", "seeds must be distinct")?;
        if let Some(d) = &self.dataset {
            check(d.val_fraction > 0.0 && d.val_fraction < 1.0, "/dataset/val_fraction", "must lie in (0, 1)")?;
        }
        if let Some(t) = &self.teacher {
            check(!t.channels.is_empty() && !t.channels.contains(&0), "/teacher/channels", "need at least one non-empty group")?;
            check_train(&t.train, "/teacher/train")?;
        }
        if let Some(t) = &self.train {
            check_train(t, "/train")?;
        }
        for (i, &m) in self.per_class.iter().enumerate() {
            check(m > 0, format!("/per_class/{i}"), "must be positive")?;
        }
        let methods = &self.method.0;
        if methods.iter().any(Method::needs_teacher) {
            check(self.teacher.is_some(), "/teacher", "the selected methods need a teacher")?;
        }
        let uses_pairs = methods.iter().any(Method::uses_pairs);
        check(!uses_pairs || !self.pairs.is_empty(), "/pairs", "the selected methods need at least one tap pair")?;
        check(uses_pairs || self.pairs.is_empty(), "/pairs", "no selected method uses tap pairs")?;
        for (i, p) in self.pairs.iter().enumerate() {
            if let Some(w) = p.weight {
                check(w >= 0.0 && w.is_finite(), format!("/pairs/{i}/weight"), "must be non-negative")?;
            }
        }
        check(self.kd.temperature > 0.0, "/kd/temperature", "must be positive")?;
        check(self.kd.weight >= 0.0, "/kd/weight", "must be non-negative")?;
        if let Some(g) = &self.grid {
            check(!g.lambda1.is_empty(), "/grid/lambda1", "must not be empty")?;
            check(!g.lambda2.is_empty(), "/grid/lambda2", "must not be empty")?;
            for (i, &v) in g.lambda1.iter().enumerate() {
                check(v > 0.0 && v.is_finite(), format!("/grid/lambda1/{i}"), "must be positive")?;
            }
            for (i, &v) in g.lambda2.iter().enumerate() {
                check(v >= 0.0 && v.is_finite(), format!("/grid/lambda2/{i}"), "must be non-negative")?;
            }
        }
        if let Some(mi) = &self.mi_bench {
            check(!mi.rho.is_empty(), "/mi_bench/rho", "at least one correlation is required")?;
            for (i, r) in mi.rho.iter().enumerate() {
                check(r.abs() < 1.0, format!("/mi_bench/rho/{i}"), "|rho| must be below 1")?;
            }
            if let Some(t) = &mi.train {
                check_train(t, "/mi_bench/train")?;
            }
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<&DatasetConfig> {
        self.dataset.as_ref().ok_or_else(|| CliError::config("/dataset", "section required by this command"))
    }

    pub fn teacher(&self) -> Result<&TeacherConfig> {
        self.teacher.as_ref().ok_or_else(|| CliError::config("/teacher", "section required by this command"))
    }

    pub fn student(&self) -> Result<&StudentConfig> {
        self.student.as_ref().ok_or_else(|| CliError::config("/student", "section required by this command"))
    }

    pub fn train(&self) -> Result<&TrainConfig> {
        self.train.as_ref().ok_or_else(|| CliError::config("/train", "section required by this command"))
    }

    pub fn mi_bench(&self) -> Result<&MiBenchSection> {
        self.mi_bench.as_ref().ok_or_else(|| CliError::config("/mi_bench", "section required by this command"))
    }

    pub fn teacher_checkpoint(&self) -> Result<PathBuf> {
        let t = self.teacher()?;
        Ok(t.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("teacher.ckpt")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Git-style object hash (`blob <len>\0` header, SHA-256) of the
    /// compact resolved JSON.
    pub fn content_hash(&self) -> String {
        let body = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", body.len()).as_bytes());
        h.update(&body);
        hex::encode(h.finalize())
    }
}
