//! Experiment configuration: JSON, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use sdprune_core::optim::Milestone;
use sdprune_core::{GroupingStrategy, LrSchedule, ModelSpec, OptimizerKind, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default = "default_partition")]
    pub partition: GroupingStrategy,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prox_check: Option<ProxCheckConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connect: Option<ConnectConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contour: Option<ContourConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theory: Option<TheoryConfig>,
}

fn default_partition() -> GroupingStrategy {
    GroupingStrategy::PerOutputUnit
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic(Generator),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        #[serde(default)]
        limit: Option<usize>,
    },
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        #[serde(default)]
        classification: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    TwoMoons {
        n_train: usize,
        #[serde(default)]
        n_test: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    TeacherStudent {
        in_dim: usize,
        hidden: usize,
        n_train: usize,
        #[serde(default)]
        n_test: usize,
        #[serde(default)]
        noise: f64,
    },
    FlatRegression {
        n_samples: usize,
        d_active: usize,
        d_flat: usize,
        #[serde(default = "default_spectrum")]
        spectrum: (f64, f64),
    },
}

fn default_noise() -> f64 {
    0.1
}

fn default_spectrum() -> (f64, f64) {
    (1.0, 4.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_kind")]
    pub kind: OptimizerKind,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub milestones: Vec<Milestone>,
    #[serde(default)]
    pub c: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub rda_lambda: f64,
    #[serde(default)]
    pub sparsity_floor: Option<f64>,
}

fn default_kind() -> OptimizerKind {
    OptimizerKind::Sgd
}

fn default_gamma() -> f64 {
    0.1
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: default_kind(),
            gamma: default_gamma(),
            milestones: Vec::new(),
            c: 0.0,
            mu: 0.0,
            momentum: 0.0,
            rda_lambda: 0.0,
            sparsity_floor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Steps between trajectory rows; 0 means once per epoch.
    #[serde(default)]
    pub log_stride: usize,
    #[serde(default)]
    pub snapshot_stride: Option<usize>,
}

fn default_epochs() -> usize {
    10
}

fn default_batch() -> usize {
    32
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
            log_stride: 0,
            snapshot_stride: None,
        }
    }
}

pub const ARTIFACTS: &[&str] = &[
    "trajectory", "checkpoint", "angles", "flatness", "spectrum", "prune", "prox_cases", "curve", "grid",
    "anchors", "residuals",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Artifacts to write; all when absent. `report.json` is always written.
    #[serde(default)]
    pub emit: Option<Vec<String>>,
}

impl OutputConfig {
    pub fn wants(&self, artifact: &str) -> bool {
        self.emit.as_ref().is_none_or(|e| e.iter().any(|a| a == artifact))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub checkpoint: PathBuf,
    pub lambdas: Vec<f64>,
    #[serde(default = "default_zero_tol")]
    pub zero_tol: f64,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
}

fn default_zero_tol() -> f64 {
    sdprune_core::sdp_oracle::DEFAULT_ZERO_TOL
}

fn default_grad_tol() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxCheckConfig {
    #[serde(default = "default_cases")]
    pub n_cases: usize,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_prox_tol")]
    pub tolerance: f64,
}

fn default_cases() -> usize {
    10_000
}

fn default_grid() -> usize {
    sdprune_core::prox::DEFAULT_GRID
}

fn default_prox_tol() -> f64 {
    1e-6
}

impl Default for ProxCheckConfig {
    fn default() -> Self {
        ProxCheckConfig {
            n_cases: default_cases(),
            grid: default_grid(),
            tolerance: default_prox_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectConfig {
    pub checkpoint_a: PathBuf,
    pub checkpoint_b: PathBuf,
    #[serde(default = "default_curve_epochs")]
    pub epochs: usize,
    #[serde(default = "default_gamma")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_curve_epochs() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContourConfig {
    pub checkpoints: [PathBuf; 3],
    #[serde(default = "default_resolution")]
    pub resolution: (usize, usize),
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_resolution() -> (usize, usize) {
    (21, 21)
}

fn default_margin() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theorem {
    Thm2,
    Thm3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    pub which: Theorem,
    pub gammas: Vec<f64>,
    pub c: f64,
    pub mu: f64,
    pub t_end: f64,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_stride")]
    pub stride: f64,
    #[serde(default = "default_zero_tol")]
    pub zero_tol: f64,
    /// Rescales groups of the initial point; `null` entries are left as drawn.
    #[serde(default)]
    pub init_group_norms: Option<Vec<Option<f64>>>,
    /// Repeats the smallest-gamma run at half the stride (deterministic
    /// expansion only) and reports the relative change.
    #[serde(default)]
    pub stride_check: bool,
}

fn default_points() -> usize {
    50
}

fn default_stride() -> f64 {
    1e-3
}

impl ExperimentConfig {
    /// Parses `text`, applying `key.path=value` overrides and a seed override
    /// before typed validation.
    pub fn parse(text: &str, overrides: &[String], seed: Option<u64>) -> Result<(Self, Value), CliError> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        if let Some(s) = seed {
            apply_override(&mut value, &format!("run.seed={s}"))?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(value.clone()).map_err(|e| CliError::Config(e.to_string()))?;
        Ok((cfg, value))
    }

    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<(Self, Value), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let (mut cfg, value) = Self::parse(&text, overrides, seed)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok((cfg, value))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            Some(DataConfig::Idx { train_images, train_labels, test_images, test_labels, .. }) => {
                fix(train_images);
                fix(train_labels);
                test_images.iter_mut().for_each(fix);
                test_labels.iter_mut().for_each(fix);
            }
            Some(DataConfig::Csv { train, test, .. }) => {
                fix(train);
                test.iter_mut().for_each(fix);
            }
            _ => {}
        }
        if let Some(p) = &mut self.prune {
            fix(&mut p.checkpoint);
        }
        self.outputs.dir.iter_mut().for_each(fix);
        if let Some(c) = &mut self.connect {
            fix(&mut c.checkpoint_a);
            fix(&mut c.checkpoint_b);
        }
        if let Some(c) = &mut self.contour {
            c.checkpoints.iter_mut().for_each(fix);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if let Some(emit) = &self.outputs.emit {
            if let Some(a) = emit.iter().find(|a| !ARTIFACTS.contains(&a.as_str())) {
                return bad(format!("unknown artifact `{a}`; known: {}", ARTIFACTS.join(", ")));
            }
        }
        let o = &self.optimizer;
        if o.kind == OptimizerKind::AltSdp && !(o.c > 0.0 && o.mu > 0.0) {
            return bad(format!("altsdp needs c > 0 and mu > 0, got c = {}, mu = {}", o.c, o.mu));
        }
        if o.kind == OptimizerKind::L1Dp && !(o.c > 0.0 && o.mu > 0.0) {
            return bad(format!("l1dp needs c > 0 and mu > 0, got c = {}, mu = {}", o.c, o.mu));
        }
        if self.run.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Some(t) = &self.theory {
            if t.gammas.is_empty() {
                return bad("theory.gammas must not be empty".into());
            }
        }
        for p in self.referenced_files() {
            if !p.is_file() {
                return bad(format!("referenced file {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    fn referenced_files(&self) -> Vec<&Path> {
        let mut out: Vec<&Path> = Vec::new();
        match &self.data {
            Some(DataConfig::Idx { train_images, train_labels, test_images, test_labels, .. }) => {
                out.extend([train_images.as_path(), train_labels.as_path()]);
                out.extend(test_images.iter().chain(test_labels.iter()).map(PathBuf::as_path));
            }
            Some(DataConfig::Csv { train, test, .. }) => {
                out.push(train);
                out.extend(test.iter().map(PathBuf::as_path));
            }
            _ => {}
        }
        if let Some(p) = &self.prune {
            out.push(&p.checkpoint);
        }
        if let Some(c) = &self.connect {
            out.extend([c.checkpoint_a.as_path(), c.checkpoint_b.as_path()]);
        }
        if let Some(c) = &self.contour {
            out.extend(c.checkpoints.iter().map(PathBuf::as_path));
        }
        out
    }

    pub fn train_config(&self) -> TrainConfig {
        let o = &self.optimizer;
        TrainConfig {
            optimizer: o.kind,
            epochs: self.run.epochs,
            batch_size: self.run.batch_size,
            schedule: LrSchedule {
                base: o.gamma,
                milestones: o.milestones.clone(),
            },
            momentum: o.momentum,
            c: o.c,
            mu: o.mu,
            rda_lambda: o.rda_lambda,
            sparsity_floor: o.sparsity_floor,
            log_every: self.run.log_stride,
            snapshot_every: self.run.snapshot_stride,
        }
    }
}

/// SHA-256 over the canonical (key-sorted, compact) JSON of the resolved
/// config, ignoring the output directory.
pub fn config_hash(value: &Value) -> String {
    let mut v = value.clone();
    if let Some(outputs) = v.get_mut("outputs").and_then(Value::as_object_mut) {
        outputs.remove("dir");
    }
    let canonical = serde_json::to_string(&v).expect("JSON values always serialize");
    Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// `a.b.c=value`; the value is parsed as JSON and falls back to a string.
fn apply_override(root: &mut Value, ov: &str) -> Result<(), CliError> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{ov}` is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("override `{ov}` has an empty key segment")));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just set")
            }
            _ => {
                return Err(CliError::Config(format!(
                    "override `{ov}`: `{}` is not an object",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last segment")
}
