use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use sdprune_core::analysis::{
    angle_series, angle_table, bezier_connect, flops_reduction, nonincreasing_with_slack, plane_contour,
    pruned_units, theorem2_residual, theorem3_deterministic_check, BezierParams, TheoryParams,
};
use sdprune_core::grouping::{group_norms, make_partition, sparsity};
use sdprune_core::linalg::Rng;
use sdprune_core::model::{
    flat_linear_regression, load_csv, load_idx, make_teacher_student, two_moons, ModelKind, DEFAULT_HESSIAN_CAP,
};
use sdprune_core::prox::prox_suite;
use sdprune_core::sdp_oracle::{flatness_table, flat_subspace, prune_with_factors, direction_factors};
use sdprune_core::table::{fmt, Table};
use sdprune_core::{train, Checkpoint, Dataset, Error, GroupPartition, Model, ParamVector};

use crate::config::{DataConfig, ExperimentConfig, Generator, Theorem};
use crate::{CliError, RunReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    PruneExact,
    ProxCheck,
    Connect,
    Contour,
    Theory,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::PruneExact => "prune-exact",
            Command::ProxCheck => "prox-check",
            Command::Connect => "connect",
            Command::Contour => "contour",
            Command::Theory => "theory",
        }
    }
}

/// Output directory plus provenance shared by every artifact.
struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    hash: String,
    seed: u64,
    artifacts: BTreeMap<String, PathBuf>,
    warnings: Vec<String>,
}

impl Ctx<'_> {
    fn preamble(&self) -> String {
        format!("config_hash={}, seed={}", self.hash, self.seed)
    }

    fn table(&mut self, artifact: &str, file: &str, table: &Table) -> Result<(), CliError> {
        if !self.cfg.outputs.wants(artifact) {
            return Ok(());
        }
        let path = self.out.join(file);
        table.write(&path, Some(&self.preamble()))?;
        self.artifacts.insert(file.trim_end_matches(".csv").to_string(), path);
        Ok(())
    }

    fn json(&mut self, artifact: &str, file: &str, value: &impl Serialize) -> Result<(), CliError> {
        if !self.cfg.outputs.wants(artifact) {
            return Ok(());
        }
        let mut v = serde_json::to_value(value).map_err(Error::from)?;
        if let Value::Object(map) = &mut v {
            map.insert("config_hash".into(), json!(self.hash));
            map.insert("seed".into(), json!(self.seed));
        }
        let path = self.out.join(file);
        write_json(&path, &v)?;
        self.artifacts.insert(file.trim_end_matches(".json").to_string(), path);
        Ok(())
    }

    fn seed_for(&self, label: &str) -> u64 {
        Rng::derive_seed(self.seed, label)
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(Error::from)?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::Core(Error::Io { path: path.to_path_buf(), source: e }))
}

/// Runs `cmd` and writes its artifacts plus `report.json` under the output
/// directory (`out` or the config's `outputs.dir`).
pub fn run(cmd: Command, cfg: &ExperimentConfig, raw: &Value, out: Option<&Path>) -> Result<RunReport, CliError> {
    cfg.validate()?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.outputs.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Core(Error::Io { path: out.clone(), source: e }))?;
    let mut ctx = Ctx {
        cfg,
        out,
        hash: crate::config_hash(raw),
        seed: cfg.run.seed,
        artifacts: BTreeMap::new(),
        warnings: Vec::new(),
    };
    let start = Instant::now();
    let mut report = match cmd {
        Command::Train => cmd_train(&mut ctx)?,
        Command::PruneExact => cmd_prune_exact(&mut ctx)?,
        Command::ProxCheck => cmd_prox_check(&mut ctx)?,
        Command::Connect => cmd_connect(&mut ctx)?,
        Command::Contour => cmd_contour(&mut ctx)?,
        Command::Theory => cmd_theory(&mut ctx)?,
    };
    report.command = cmd.name().to_string();
    report.wall_time_s = start.elapsed().as_secs_f64();
    let report_path = ctx.out.join("report.json");
    ctx.artifacts.insert("report".into(), report_path.clone());
    report.artifacts = std::mem::take(&mut ctx.artifacts);
    report.warnings.splice(0..0, std::mem::take(&mut ctx.warnings));
    write_json(&report_path, &report)?;
    Ok(report)
}

fn blank(ctx: &Ctx) -> RunReport {
    RunReport {
        command: String::new(),
        config_hash: ctx.hash.clone(),
        seed: ctx.seed,
        final_train_loss: None,
        final_test_accuracy: None,
        sparsity: None,
        flops_reduction: None,
        wall_time_s: 0.0,
        artifacts: BTreeMap::new(),
        warnings: Vec::new(),
        passed: None,
        details: Value::Null,
    }
}

struct Setup {
    model: Model,
    train: Dataset,
    test: Option<Dataset>,
    partition: GroupPartition,
}

fn setup(ctx: &Ctx) -> Result<Setup, CliError> {
    let cfg = ctx.cfg;
    let spec = cfg
        .model
        .clone()
        .ok_or_else(|| CliError::Config("the `model` section is required".into()))?;
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::Config("the `data` section is required".into()))?;
    let model = Model::new(spec)?;
    let seed = ctx.seed_for("data");
    let (train, test) = match data {
        DataConfig::Synthetic(Generator::TwoMoons { n_train, n_test, noise }) => {
            let test = match *n_test {
                0 => None,
                n => Some(two_moons(ctx.seed_for("data-test"), n, *noise)?),
            };
            (two_moons(seed, *n_train, *noise)?, test)
        }
        DataConfig::Synthetic(Generator::TeacherStudent { in_dim, hidden, n_train, n_test, noise }) => {
            let ts = make_teacher_student(seed, *in_dim, *hidden, n_train + n_test, *noise)?;
            let idx: Vec<usize> = (0..n_train + n_test).collect();
            let train = ts.dataset.subset(&idx[..*n_train], "teacher-student train")?;
            let test = match n_test {
                0 => None,
                _ => Some(ts.dataset.subset(&idx[*n_train..], "teacher-student test")?),
            };
            (train, test)
        }
        DataConfig::Synthetic(Generator::FlatRegression { n_samples, d_active, d_flat, spectrum }) => {
            (flat_linear_regression(seed, *n_samples, *d_active, *d_flat, *spectrum)?.dataset, None)
        }
        DataConfig::Idx { train_images, train_labels, test_images, test_labels, limit } => {
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => Some(load_idx(i, l, *limit)?),
                (None, None) => None,
                _ => return Err(CliError::Config("test_images and test_labels go together".into())),
            };
            (load_idx(train_images, train_labels, *limit)?, test)
        }
        DataConfig::Csv { train, test, classification } => {
            let t = test.as_ref().map(|p| load_csv(p, *classification)).transpose()?;
            (load_csv(train, *classification)?, t)
        }
    };
    let n = model.data(&train).len();
    if cfg.run.batch_size > n {
        return Err(CliError::Config(format!(
            "batch_size {} exceeds the {n} training samples",
            cfg.run.batch_size
        )));
    }
    let partition = make_partition(model.layout(), &cfg.partition)?;
    Ok(Setup { model, train, test, partition })
}

fn init_point(ctx: &Ctx, s: &Setup) -> ParamVector {
    s.model.init_params(&mut Rng::new(ctx.seed_for("init")))
}

fn load_checkpoint(path: &Path, model: &Model) -> Result<Checkpoint, CliError> {
    let ck = Checkpoint::load(path)?;
    if ck.w.len() != model.dim() {
        return Err(Error::Dimension {
            context: "checkpoint parameter count",
            expected: model.dim(),
            got: ck.w.len(),
        }
        .into());
    }
    Ok(ck)
}

/// FLOPs reduction from the hidden units whose incoming weights are all zero.
fn structural_flops(model: &Model, w: &[f64], warnings: &mut Vec<String>) -> Result<Option<f64>, CliError> {
    if model.spec().kind != ModelKind::Mlp {
        return Ok(None);
    }
    let mut pruned = pruned_units(model.layout(), w)?;
    if let Some(last) = pruned.pop() {
        if !last.is_empty() {
            warnings.push(format!("{} output units are zero; they are not counted as pruned", last.len()));
        }
    }
    match flops_reduction(&model.spec().layer_sizes, &pruned) {
        Ok(f) => Ok(Some(f)),
        Err(e @ Error::Structural(_)) => {
            warnings.push(format!("FLOPs reduction unavailable: {e}"));
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_train(ctx: &mut Ctx) -> Result<RunReport, CliError> {
    let s = setup(ctx)?;
    let w0 = init_point(ctx, &s);
    let tc = ctx.cfg.train_config();
    let outcome = train(&s.model, &s.train, s.test.as_ref(), &s.partition, w0, &tc, ctx.seed_for("shuffle"))?;
    ctx.table("trajectory", "trajectory.csv", &outcome.log.to_table())?;
    if ctx.cfg.run.snapshot_stride.is_some() {
        let angles = angle_series(&outcome.log, &s.partition)?;
        ctx.table("angles", "angles.csv", &angle_table(&angles))?;
    }
    let mut ck = outcome.checkpoint.clone();
    ck.config_hash = Some(ctx.hash.clone());
    if ctx.cfg.outputs.wants("checkpoint") {
        let path = ctx.out.join("checkpoint.json");
        ck.save(&path)?;
        ctx.artifacts.insert("checkpoint".into(), path);
    }
    let mut report = blank(ctx);
    report.flops_reduction = structural_flops(&s.model, &outcome.w, &mut report.warnings)?;
    report.final_train_loss = Some(outcome.final_loss);
    report.final_test_accuracy = outcome.final_accuracy;
    report.sparsity = Some(outcome.final_sparsity);
    report.details = json!({
        "steps": outcome.steps,
        "optimizer": ctx.cfg.optimizer.kind,
        "zero_groups": group_norms(&outcome.w, &s.partition)?.iter().filter(|&&n| n == 0.0).count(),
        "groups": s.partition.len(),
    });
    Ok(report)
}

fn cmd_prune_exact(ctx: &mut Ctx) -> Result<RunReport, CliError> {
    let pc = ctx
        .cfg
        .prune
        .clone()
        .ok_or_else(|| CliError::Config("the `prune` section is required".into()))?;
    let s = setup(ctx)?;
    let ck = load_checkpoint(&pc.checkpoint, &s.model)?;
    let w = ck.w.to_vec();
    let h = s.model.hessian_fd(&w, &s.train, DEFAULT_HESSIAN_CAP)?;
    let sub = flat_subspace(&h, pc.zero_tol)?;
    let table = flatness_table(&s.model, &s.train, &w, &s.partition, &sub, &pc.lambdas, pc.grad_tol)?;
    if let Some(wn) = &table.warning {
        ctx.warnings.push(wn.clone());
    }
    let factors = direction_factors(&w, &s.partition, &sub)?;
    for &lambda in &pc.lambdas {
        let sol = prune_with_factors(&w, &s.partition, &factors, lambda)?;
        ctx.json("prune", &format!("prune_{}.json", fmt(lambda)), &sol)?;
    }
    ctx.table("flatness", "flatness.csv", &table.to_table())?;
    let mut spectrum = Table::new(&["index", "eigenvalue"]);
    for (i, l) in sub.eigenvalues.iter().enumerate() {
        spectrum.push(vec![i.to_string(), fmt(*l)]);
    }
    ctx.table("spectrum", "spectrum.csv", &spectrum)?;
    let mut report = blank(ctx);
    report.final_train_loss = Some(s.model.full_loss(&w, &s.train)?);
    report.sparsity = Some(sparsity(&w, &s.partition)?);
    report.details = json!({
        "flat_dimension": sub.k,
        "gradient_norm": table.gradient_norm,
        "direction_factors": factors,
        "rows": table.rows,
    });
    Ok(report)
}

fn cmd_prox_check(ctx: &mut Ctx) -> Result<RunReport, CliError> {
    let pc = ctx.cfg.prox_check.clone().unwrap_or_default();
    let suite = prox_suite(pc.n_cases, ctx.seed_for("prox"), pc.grid, pc.tolerance)?;
    ctx.table("prox_cases", "prox_cases.csv", &suite.to_table())?;
    let mut report = blank(ctx);
    report.passed = Some(suite.failures() == 0);
    report.details = json!({
        "cases": suite.cases.len(),
        "failures": suite.failures(),
        "max_residual": suite.max_residual(),
        "tolerance": pc.tolerance,
        "grid": pc.grid,
    });
    Ok(report)
}

fn cmd_connect(ctx: &mut Ctx) -> Result<RunReport, CliError> {
    let cc = ctx
        .cfg
        .connect
        .clone()
        .ok_or_else(|| CliError::Config("the `connect` section is required".into()))?;
    let s = setup(ctx)?;
    let a = load_checkpoint(&cc.checkpoint_a, &s.model)?;
    let b = load_checkpoint(&cc.checkpoint_b, &s.model)?;
    let params = BezierParams::new(cc.epochs, cc.lr, cc.batch_size);
    let res = bezier_connect(&s.model, &s.train, &a.w, &b.w, &params, &mut Rng::new(ctx.seed_for("bezier")))?;
    ctx.table("curve", "curve.csv", &res.to_table())?;
    let mut report = blank(ctx);
    report.final_train_loss = Some(res.max_loss);
    report.details = json!({
        "max_loss": res.max_loss,
        "endpoint_losses": [res.endpoint_losses.0, res.endpoint_losses.1],
        "barrier": res.barrier(),
    });
    Ok(report)
}

fn cmd_contour(ctx: &mut Ctx) -> Result<RunReport, CliError> {
    let cc = ctx
        .cfg
        .contour
        .clone()
        .ok_or_else(|| CliError::Config("the `contour` section is required".into()))?;
    let s = setup(ctx)?;
    let ws = cc
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p, &s.model).map(|c| c.w))
        .collect::<Result<Vec<_>, _>>()?;
    let test = s.test.as_ref().or(Some(&s.train));
    let grid = plane_contour(&s.model, &s.train, test, &ws[0], &ws[1], &ws[2], cc.resolution, cc.margin)?;
    ctx.table("grid", "grid.csv", &grid.to_table())?;
    ctx.table("anchors", "anchors.csv", &grid.anchor_table())?;
    let mut report = blank(ctx);
    report.details = json!({
        "resolution": grid.resolution,
        "u_range": grid.u_range,
        "v_range": grid.v_range,
        "anchors": grid.anchors,
        "min_loss": grid.values.iter().copied().fold(f64::INFINITY, f64::min),
    });
    Ok(report)
}

fn cmd_theory(ctx: &mut Ctx) -> Result<RunReport, CliError> {
    let tc = ctx
        .cfg
        .theory
        .clone()
        .ok_or_else(|| CliError::Config("the `theory` section is required".into()))?;
    let s = setup(ctx)?;
    let mut w0 = init_point(ctx, &s).to_vec();
    if let Some(norms) = &tc.init_group_norms {
        if norms.len() != s.partition.len() {
            return Err(CliError::Config(format!(
                "init_group_norms has {} entries for {} groups",
                norms.len(),
                s.partition.len()
            )));
        }
        let current = group_norms(&w0, &s.partition)?;
        for (i, target) in norms.iter().enumerate() {
            let Some(t) = *target else { continue };
            if current[i] == 0.0 && t != 0.0 {
                return Err(CliError::Config(format!("group {i} is zero and cannot be rescaled")));
            }
            for &j in s.partition.group(i) {
                w0[j] *= if t == 0.0 { 0.0 } else { t / current[i] };
            }
        }
    }
    let mut gammas = tc.gammas.clone();
    gammas.sort_by(|a, b| b.total_cmp(a));
    let mut finals = Vec::new();
    let mut series_json = Vec::new();
    let mut warned = false;
    for &gamma in &gammas {
        let params = TheoryParams {
            gamma,
            c: tc.c,
            mu: tc.mu,
            t_end: tc.t_end,
            points: tc.points,
            zero_tol: tc.zero_tol,
            stride: tc.stride,
        };
        let series = match tc.which {
            Theorem::Thm2 => theorem2_residual(&s.model, &s.train, &w0, &s.partition, &params)?,
            Theorem::Thm3 => theorem3_deterministic_check(&s.model, &s.train, &w0, &s.partition, &params)?,
        };
        if !warned {
            ctx.warnings.extend(series.warnings.iter().cloned());
            warned = true;
        }
        ctx.table("residuals", &format!("residuals_{}.csv", fmt(gamma)), &series.to_table())?;
        finals.push(series.final_residual());
        series_json.push(json!({
            "gamma": gamma,
            "final_residual": series.final_residual(),
            "max_residual": series.max_residual(),
            "final_sparsity": series.final_sparsity,
        }));
    }
    let trend = nonincreasing_with_slack(&finals, 1, 0.10);
    let mut stride_change = None;
    if tc.stride_check && tc.which == Theorem::Thm3 {
        let gamma = *gammas.last().expect("validated nonempty");
        let params = TheoryParams {
            gamma,
            c: tc.c,
            mu: tc.mu,
            t_end: tc.t_end,
            points: tc.points,
            zero_tol: tc.zero_tol,
            stride: 0.5 * tc.stride,
        };
        let half = theorem3_deterministic_check(&s.model, &s.train, &w0, &s.partition, &params)?;
        let base = *finals.last().expect("one run per gamma");
        stride_change = Some((half.final_residual() - base).abs() / base.max(f64::MIN_POSITIVE));
    }
    let guaranteed = tc.c == 0.0 || (tc.mu > 0.5 && tc.mu < 1.0);
    let stride_ok = stride_change.is_none_or(|c| c < 0.10);
    let mut report = blank(ctx);
    report.passed = Some((trend && stride_ok) || !guaranteed);
    if !guaranteed && !trend {
        report.warnings.push("residual trend not monotone; no guarantee applies for this mu".into());
    }
    report.details = json!({
        "which": tc.which,
        "trend_nonincreasing": trend,
        "stride_relative_change": stride_change,
        "series": series_json,
    });
    Ok(report)
}
