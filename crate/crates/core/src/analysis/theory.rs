use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::grouping::{group_norms, normalize_groups, sparsity, GroupPartition};
use crate::linalg::{matrix_exp_scaled, norm, sub, DenseMatrix};
use crate::model::{gradient_flow, Dataset, Model, ModelKind, DEFAULT_HESSIAN_CAP};
use crate::optim::{validate_hyper, AltSdpState};
use crate::param::ParamVector;
use crate::sdp_oracle::{flat_subspace, project, FlatSubspace, DEFAULT_ZERO_TOL};
use crate::table::{fmt, Table};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryParams {
    pub gamma: f64,
    pub c: f64,
    pub mu: f64,
    pub t_end: f64,
    /// Number of evenly spaced report times in `(0, t_end]`.
    #[serde(default = "default_points")]
    pub points: usize,
    /// Relative eigenvalue cut for the flat subspace.
    #[serde(default = "default_zero_tol")]
    pub zero_tol: f64,
    /// Gradient-flow step and trapezoid stride for the deterministic expansion.
    #[serde(default = "default_stride")]
    pub stride: f64,
}

fn default_points() -> usize {
    50
}

fn default_zero_tol() -> f64 {
    DEFAULT_ZERO_TOL
}

fn default_stride() -> f64 {
    1e-3
}

impl TheoryParams {
    pub fn new(gamma: f64, c: f64, mu: f64, t_end: f64) -> Self {
        TheoryParams {
            gamma,
            c,
            mu,
            t_end,
            points: default_points(),
            zero_tol: default_zero_tol(),
            stride: default_stride(),
        }
    }

    fn validate(&self) -> Result<Vec<String>> {
        validate_hyper(self.gamma, self.c, self.mu)?;
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::Config(format!("t_end must be positive, got {}", self.t_end)));
        }
        if self.points == 0 {
            return Err(Error::Config("at least one report point is required".into()));
        }
        if !(self.stride > 0.0 && self.stride <= self.t_end) {
            return Err(Error::Config(format!("stride must lie in (0, t_end], got {}", self.stride)));
        }
        let mut warnings = Vec::new();
        if self.c > 0.0 && !(self.mu > 0.5 && self.mu < 1.0) {
            warnings.push(format!(
                "mu = {} lies outside (0.5, 1); the asymptotic guarantee does not apply",
                self.mu
            ));
        }
        Ok(warnings)
    }

    fn steps(&self) -> u64 {
        (self.t_end / self.gamma + 1e-9).floor() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualPoint {
    pub t: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSeries {
    pub gamma: f64,
    pub points: Vec<ResidualPoint>,
    /// Group sparsity of the AltSDP iterate at `t_end`.
    pub final_sparsity: f64,
    pub final_w: ParamVector,
    pub warnings: Vec<String>,
}

impl ResidualSeries {
    pub fn final_residual(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.residual)
    }

    pub fn max_residual(&self) -> f64 {
        self.points.iter().fold(0.0, |m, p| m.max(p.residual))
    }

    /// Columns `t,residual,gamma`.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["t", "residual", "gamma"]);
        for p in &self.points {
            t.push(vec![fmt(p.t), fmt(p.residual), fmt(self.gamma)]);
        }
        t
    }
}

/// Whether `values` is nonincreasing apart from at most `max_inversions`
/// increases, each at most `slack` relative to the preceding value.
pub fn nonincreasing_with_slack(values: &[f64], max_inversions: usize, slack: f64) -> bool {
    let mut inversions = 0;
    for w in values.windows(2) {
        if w[1] > w[0] {
            inversions += 1;
            if w[1] > w[0] * (1.0 + slack) {
                return false;
            }
        }
    }
    inversions <= max_inversions
}

fn report_steps(p: &TheoryParams) -> Vec<u64> {
    let total = p.steps();
    let mut out: Vec<u64> = (1..=p.points)
        .map(|k| ((k as f64 / p.points as f64) * total as f64).round() as u64)
        .filter(|&n| n > 0)
        .collect();
    out.dedup();
    out
}

fn divergence(step: u64, e: Error) -> Error {
    match e {
        Error::Numeric(detail) => Error::Divergence { step: step as usize, detail },
        other => other,
    }
}

/// Signed direction factors of a possibly partly zero `w`; zero groups get 0.
fn direction_factors_or_zero(w: &[f64], g: &GroupPartition, flat: &FlatSubspace) -> Result<Vec<f64>> {
    let e = normalize_groups(w, g)?;
    let pe = project(flat, &e)?;
    Ok(g
        .groups()
        .iter()
        .map(|group| group.iter().map(|&j| e[j] * pe[j]).sum())
        .collect())
}

/// Relative distance between the AltSDP iterate and the closed-form
/// directional pruning of the gradient-descent iterate with the same step
/// size, over `(0, t_end]`.
pub fn theorem2_residual(
    model: &Model,
    dataset: &Dataset,
    w0: &[f64],
    partition: &GroupPartition,
    p: &TheoryParams,
) -> Result<ResidualSeries> {
    let warnings = p.validate()?;
    check_len("initial point", model.dim(), w0.len())?;
    check_len("partition", model.dim(), partition.dim())?;
    check_finite("initial point", w0)?;

    let report = report_steps(p);
    let mut alt = AltSdpState::new(ParamVector::from(w0), partition.clone(), p.gamma, p.c, p.mu)?;
    let mut gd = w0.to_vec();
    let mut snapshots = Vec::with_capacity(report.len());
    let mut next = 0;
    for n in 0..p.steps() {
        let g_alt = model.full_gradient(&alt.w, dataset).map_err(|e| divergence(n, e))?;
        alt.step(&g_alt).map_err(|e| divergence(n, e))?;
        let g_gd = model.full_gradient(&gd, dataset).map_err(|e| divergence(n, e))?;
        for (w, g) in gd.iter_mut().zip(g_gd.iter()) {
            *w -= p.gamma * g;
        }
        if gd.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                step: n as usize,
                detail: "non-finite gradient-descent iterate".into(),
            });
        }
        if next < report.len() && n + 1 == report[next] {
            snapshots.push((n + 1, alt.w.clone(), gd.clone()));
            next += 1;
        }
    }

    let h = model.hessian_fd(&gd, dataset, DEFAULT_HESSIAN_CAP)?;
    let flat = flat_subspace(&h, p.zero_tol)?;
    let mut points = Vec::with_capacity(snapshots.len());
    for (n, w_alt, w_gd) in &snapshots {
        let t = *n as f64 * p.gamma;
        let lambda = p.c * p.gamma.sqrt() * t.powf(p.mu);
        let s = direction_factors_or_zero(w_gd, partition, &flat)?;
        let norms = group_norms(w_gd, partition)?;
        let mut rhs = vec![0.0; w_gd.len()];
        for (i, group) in partition.groups().iter().enumerate() {
            if norms[i] == 0.0 {
                continue;
            }
            let factor = (1.0 - lambda * s[i] / norms[i]).max(0.0);
            for &j in group {
                rhs[j] = factor * w_gd[j];
            }
        }
        let residual = norm(&sub(w_alt, &rhs)) / (1.0 + norm(w_gd));
        points.push(ResidualPoint { t, residual });
    }
    Ok(ResidualSeries {
        gamma: p.gamma,
        points,
        final_sparsity: sparsity(&alt.w, partition)?,
        final_w: alt.w,
        warnings,
    })
}

fn require_constant_hessian(model: &Model) -> Result<()> {
    match model.spec().kind {
        ModelKind::Quadratic | ModelKind::LinearRegression => Ok(()),
        ModelKind::Mlp => Err(Error::Domain(
            "the deterministic expansion needs a constant Hessian (quadratic or linear regression)".into(),
        )),
    }
}

/// Relative distance between the AltSDP dual iterate and the deterministic
/// first-order expansion around the gradient flow.
pub fn theorem3_deterministic_check(
    model: &Model,
    dataset: &Dataset,
    w0: &[f64],
    partition: &GroupPartition,
    p: &TheoryParams,
) -> Result<ResidualSeries> {
    let warnings = p.validate()?;
    require_constant_hessian(model)?;
    check_len("initial point", model.dim(), w0.len())?;
    check_len("partition", model.dim(), partition.dim())?;
    check_finite("initial point", w0)?;

    let h = model.hessian_fd(w0, dataset, DEFAULT_HESSIAN_CAP)?;
    let flow = gradient_flow(model, w0, dataset, p.t_end, p.stride)?;
    let expansion = flow_expansion(&h, &flow.times, &flow.states, partition, p)?;

    let report: Vec<(u64, usize)> = report_steps(p)
        .into_iter()
        .map(|n| {
            let t = n as f64 * p.gamma;
            let k = nearest_index(&flow.times, t);
            (n, k)
        })
        .collect();
    let mut alt = AltSdpState::new(ParamVector::from(w0), partition.clone(), p.gamma, p.c, p.mu)?;
    let mut points = Vec::with_capacity(report.len());
    let mut next = 0;
    for n in 0..p.steps() {
        let g = model.full_gradient(&alt.w, dataset).map_err(|e| divergence(n, e))?;
        alt.step(&g).map_err(|e| divergence(n, e))?;
        while next < report.len() && n + 1 == report[next].0 {
            let k = report[next].1;
            let rhs = &expansion[k];
            let residual = norm(&sub(&alt.v, rhs)) / (1.0 + norm(&flow.states[k]));
            points.push(ResidualPoint { t: (n + 1) as f64 * p.gamma, residual });
            next += 1;
        }
    }
    Ok(ResidualSeries {
        gamma: p.gamma,
        points,
        final_sparsity: sparsity(&alt.w, partition)?,
        final_w: alt.w,
        warnings,
    })
}

fn nearest_index(times: &[f64], t: f64) -> usize {
    let k = times.partition_point(|&s| s < t);
    if k == 0 {
        return 0;
    }
    if k == times.len() || (t - times[k - 1]) <= (times[k] - t) {
        k - 1
    } else {
        k
    }
}

/// `w(t) + sqrt(gamma) c t^mu E_G(w(t)) - sqrt(gamma) c I(t)` on the flow grid,
/// with `I(t) = int_0^t exp(-H(t-s)) d(E_G(w(s)) s^mu)` by the trapezoid rule.
fn flow_expansion(
    h: &DenseMatrix,
    times: &[f64],
    states: &[ParamVector],
    g: &GroupPartition,
    p: &TheoryParams,
) -> Result<Vec<Vec<f64>>> {
    let d = h.rows();
    let scale = p.gamma.sqrt() * p.c;
    let norm_floor = 1e-12 * (1.0 + norm(&states[0]));
    let mut phi_cache: Option<(f64, DenseMatrix)> = None;
    let mut integral = vec![0.0; d];
    let mut prev_e = normalize_groups(&states[0], g)?;
    check_nonzero_groups(&states[0], g, norm_floor, times[0])?;
    let mut prev_f = vec![0.0; d];
    let mut out = Vec::with_capacity(times.len());
    out.push(states[0].to_vec());
    for k in 1..times.len() {
        let (t, w) = (times[k], &states[k]);
        check_nonzero_groups(w, g, norm_floor, t)?;
        let e = normalize_groups(w, g)?;
        for group in g.groups() {
            let inner: f64 = group.iter().map(|&j| e[j] * prev_e[j]).sum();
            if inner < 0.0 {
                return Err(Error::SignCrossing { time: t });
            }
        }
        let step = t - times[k - 1];
        let phi = match &phi_cache {
            Some((hh, m)) if *hh == step => m,
            _ => {
                phi_cache = Some((step, matrix_exp_scaled(h, step)?));
                &phi_cache.as_ref().expect("just set").1
            }
        };
        let f: Vec<f64> = e.iter().map(|x| x * t.powf(p.mu)).collect();
        let df = sub(&f, &prev_f);
        let mut carry = integral.clone();
        for (c, x) in carry.iter_mut().zip(&df) {
            *c += 0.5 * x;
        }
        integral = phi.matvec(&carry)?;
        for (c, x) in integral.iter_mut().zip(&df) {
            *c += 0.5 * x;
        }
        let lead = scale * t.powf(p.mu);
        out.push(
            (0..d)
                .map(|j| w[j] + lead * e[j] - scale * integral[j])
                .collect(),
        );
        prev_e = e;
        prev_f = f;
    }
    Ok(out)
}

fn check_nonzero_groups(w: &[f64], g: &GroupPartition, floor: f64, t: f64) -> Result<()> {
    if group_norms(w, g)?.iter().any(|&n| n <= floor) {
        return Err(Error::SignCrossing { time: t });
    }
    Ok(())
}
