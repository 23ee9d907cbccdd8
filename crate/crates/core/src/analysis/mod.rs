//! Diagnostics: training logs, the deterministic theory checks, mode
//! connectivity, loss-plane contours, angle series and FLOPs accounting.

mod landscape;
mod theory;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grouping::{normalize_groups, GroupPartition, ParamLayout};
use crate::linalg::{dot, matrix_exp_scaled, norm, DenseMatrix};
use crate::param::ParamVector;
use crate::table::{fmt, fmt_opt, Table};

pub use landscape::{bezier_connect, plane_contour, BezierCurve, BezierParams, BezierResult, PlaneGrid};
pub use theory::{
    nonincreasing_with_slack, theorem2_residual, theorem3_deterministic_check, ResidualPoint, ResidualSeries, TheoryParams,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub n: u64,
    pub t: f64,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub sparsity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_norms: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<ParamVector>,
}

/// Training trajectory, ordered by step count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub steps: Vec<LogEntry>,
}

impl TrajectoryLog {
    pub fn push(&mut self, entry: LogEntry) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if entry.n < last.n {
                return Err(Error::Config(format!(
                    "log entries must be ordered: step {} after {}",
                    entry.n, last.n
                )));
            }
        }
        self.steps.push(entry);
        Ok(())
    }

    pub fn last(&self) -> Option<&LogEntry> {
        self.steps.last()
    }

    /// Columns `n,t,train_loss,test_acc,sparsity`.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["n", "t", "train_loss", "test_acc", "sparsity"]);
        for e in &self.steps {
            t.push(vec![
                e.n.to_string(),
                fmt(e.t),
                fmt(e.train_loss),
                fmt_opt(e.test_accuracy),
                fmt(e.sparsity),
            ]);
        }
        t
    }
}

/// Angle in degrees between `w` and `E_G(w)`; `None` for a zero vector.
pub fn group_angle(w: &[f64], g: &GroupPartition) -> Result<Option<f64>> {
    let e = normalize_groups(w, g)?;
    let (nw, ne) = (norm(w), norm(&e));
    if nw == 0.0 || ne == 0.0 {
        return Ok(None);
    }
    let cos = (dot(w, &e) / (nw * ne)).clamp(-1.0, 1.0);
    Ok(Some(cos.acos().to_degrees()))
}

/// `(t, angle)` for every logged snapshot.
pub fn angle_series(log: &TrajectoryLog, g: &GroupPartition) -> Result<Vec<(f64, Option<f64>)>> {
    let mut out = Vec::new();
    for e in &log.steps {
        if let Some(w) = &e.w {
            out.push((e.t, group_angle(w, g)?));
        }
    }
    if out.is_empty() && !log.steps.is_empty() {
        return Err(Error::Config("trajectory log holds no parameter snapshots".into()));
    }
    Ok(out)
}

/// Columns `t,angle_deg`; undefined angles are written as `nan`.
pub fn angle_table(series: &[(f64, Option<f64>)]) -> Table {
    let mut t = Table::new(&["t", "angle_deg"]);
    for (time, a) in series {
        t.push(vec![fmt(*time), a.map_or_else(|| "nan".to_string(), fmt)]);
    }
    t
}

/// Relative reduction of dense multiply-add FLOPs when the listed output
/// units (per weight layer) are removed together with the next layer's
/// matching inputs.
pub fn flops_reduction(layer_sizes: &[usize], pruned: &[Vec<usize>]) -> Result<f64> {
    if layer_sizes.len() < 2 {
        return Err(Error::Structural("need at least one layer".into()));
    }
    let n_layers = layer_sizes.len() - 1;
    if pruned.len() > n_layers {
        return Err(Error::Structural(format!(
            "pruning given for {} layers, model has {n_layers}",
            pruned.len()
        )));
    }
    let mut removed = vec![0usize; layer_sizes.len()];
    for (l, units) in pruned.iter().enumerate() {
        let n_out = layer_sizes[l + 1];
        let mut seen = vec![false; n_out];
        for &u in units {
            if u >= n_out || std::mem::replace(&mut seen[u], true) {
                return Err(Error::Structural(format!("invalid unit {u} in layer {l}")));
            }
        }
        if !units.is_empty() && l + 1 == n_layers {
            return Err(Error::Structural("output units cannot be pruned".into()));
        }
        if units.len() == n_out {
            return Err(Error::Structural(format!("every unit of layer {l} is pruned")));
        }
        removed[l + 1] = units.len();
    }
    let mut dense = 0usize;
    let mut kept = 0usize;
    for l in 0..n_layers {
        let (n_in, n_out) = (layer_sizes[l], layer_sizes[l + 1]);
        dense += 2 * n_in * n_out;
        kept += 2 * (n_in - removed[l]) * (n_out - removed[l + 1]);
    }
    Ok(1.0 - kept as f64 / dense as f64)
}

/// Output units whose incoming weights and bias are all exactly zero, per
/// weight layer.
pub fn pruned_units(layout: &ParamLayout, w: &[f64]) -> Result<Vec<Vec<usize>>> {
    check_len("parameter count", layout.dim(), w.len())?;
    Ok((0..layout.layers.len())
        .map(|l| {
            (0..layout.layers[l].n_out)
                .filter(|&u| layout.unit_indices(l, u).iter().all(|&j| w[j] == 0.0))
                .collect()
        })
        .collect())
}

/// `Phi(t, s) = exp(-H (t - s))` for constant symmetric `H`, `t >= s`.
pub fn principal_matrix(h: &DenseMatrix, t: f64, s: f64) -> Result<DenseMatrix> {
    if !(t >= s) {
        return Err(Error::Domain(format!("principal matrix needs t >= s, got t = {t}, s = {s}")));
    }
    matrix_exp_scaled(h, t - s)
}

#[cfg(test)]
mod tests;
