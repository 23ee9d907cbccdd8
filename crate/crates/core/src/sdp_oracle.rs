//! Exact structured directional pruning for models small enough to form the
//! Hessian: the near-zero eigenspace of the Hessian, the projection onto it,
//! per-group direction factors and the closed-form pruned point.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grouping::{group_norms, group_slices, normalize_groups, GroupPartition};
use crate::linalg::{dot, norm, sym_eigen, DenseMatrix};
use crate::model::{Dataset, Model};
use crate::param::ParamVector;
use crate::prox::{group_prox, shrink_factor, ProxProblem};
use crate::table::{fmt, Table};

pub const DEFAULT_ZERO_TOL: f64 = 1e-3;

/// Absolute floor on the spectral scale used by the relative tolerance.
const SCALE_FLOOR: f64 = 1e-12;

/// Orthonormal basis of the (near-)flat eigenspace of a Hessian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatSubspace {
    /// `d x k`, orthonormal columns.
    pub p0: DenseMatrix,
    /// Full ascending spectrum.
    pub eigenvalues: Vec<f64>,
    pub zero_tol_rel: f64,
    pub k: usize,
    /// Every eigenvalue was retained and the whole spectrum is ~0.
    pub degenerate: bool,
}

impl FlatSubspace {
    /// Subspace spanned by the given orthonormal columns.
    pub fn from_basis(p0: DenseMatrix) -> Result<Self> {
        let defect = crate::linalg::orthonormality_defect(&p0);
        if defect > 1e-9 {
            return Err(Error::Degenerate(format!(
                "basis is not orthonormal (defect {defect:e})"
            )));
        }
        Ok(FlatSubspace {
            k: p0.cols(),
            p0,
            eigenvalues: Vec::new(),
            zero_tol_rel: 0.0,
            degenerate: false,
        })
    }

    pub fn identity(d: usize) -> Self {
        Self::from_basis(DenseMatrix::identity(d)).expect("identity is orthonormal")
    }

    pub fn zero(d: usize) -> Self {
        Self::from_basis(DenseMatrix::zeros(d, 0)).expect("empty basis is orthonormal")
    }

    pub fn dim(&self) -> usize {
        self.p0.rows()
    }

    /// `P0 P0^T`
    pub fn projector(&self) -> DenseMatrix {
        self.p0.matmul(&self.p0.transpose()).expect("shapes agree")
    }
}

/// Eigenvectors of `h` with `|lambda| <= zero_tol_rel * max(max|lambda|, 1e-12)`.
pub fn flat_subspace(h: &DenseMatrix, zero_tol_rel: f64) -> Result<FlatSubspace> {
    if !(zero_tol_rel > 0.0 && zero_tol_rel < 1.0) {
        return Err(Error::Config(format!(
            "zero_tol_rel must lie in (0, 1), got {zero_tol_rel}"
        )));
    }
    let eig = sym_eigen(h)?;
    let scale = eig.max_abs_eigenvalue().max(SCALE_FLOOR);
    let keep: Vec<usize> = (0..eig.dim())
        .filter(|&j| eig.eigenvalues[j].abs() <= zero_tol_rel * scale)
        .collect();
    let columns: Vec<Vec<f64>> = keep.iter().map(|&j| eig.eigenvectors.column(j)).collect();
    let p0 = DenseMatrix::from_columns(eig.dim(), &columns)?;
    let degenerate = keep.len() == eig.dim() && eig.max_abs_eigenvalue() <= SCALE_FLOOR;
    Ok(FlatSubspace {
        p0,
        k: keep.len(),
        eigenvalues: eig.eigenvalues,
        zero_tol_rel,
        degenerate,
    })
}

/// `P0 (P0^T x)`
pub fn project(sub: &FlatSubspace, x: &[f64]) -> Result<Vec<f64>> {
    check_len("projection", sub.dim(), x.len())?;
    let coeffs = sub.p0.tmatvec(x)?;
    sub.p0.matvec(&coeffs)
}

/// `s_i = <E(w*_i), (Pi E_G(w*))_i>`, signed.
pub fn direction_factors(w_star: &[f64], g: &GroupPartition, sub: &FlatSubspace) -> Result<Vec<f64>> {
    check_len("direction factors", g.dim(), w_star.len())?;
    check_len("direction factors", sub.dim(), w_star.len())?;
    let norms = group_norms(w_star, g)?;
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroGroup { group: i });
    }
    let e = normalize_groups(w_star, g)?;
    let pe = project(sub, &e)?;
    Ok(g
        .groups()
        .iter()
        .map(|group| group.iter().map(|&j| e[j] * pe[j]).sum())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSolution {
    pub w_pruned: ParamVector,
    pub s: Vec<f64>,
    /// Per-group factors `(1 - lambda s_i / |w*_i|)_+`.
    pub shrink: Vec<f64>,
    pub lambda: f64,
    pub pruned_groups: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl PruneSolution {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Group-wise prox with given direction factors.
pub fn prune_with_factors(w_star: &[f64], g: &GroupPartition, s: &[f64], lambda: f64) -> Result<PruneSolution> {
    check_len("pruning", g.dim(), w_star.len())?;
    check_len("direction factor count", g.len(), s.len())?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let slices = group_slices(w_star, g)?;
    let mut pruned = Vec::with_capacity(g.len());
    let mut shrink = Vec::with_capacity(g.len());
    let mut warnings = Vec::new();
    for (i, (slice, &si)) in slices.into_iter().zip(s).enumerate() {
        if si <= 0.0 {
            warnings.push(format!("group {i}: direction factor {si:e} is not positive"));
        }
        if lambda == 0.0 {
            shrink.push(if slice.iter().all(|&x| x == 0.0) { 0.0 } else { 1.0 });
            pruned.push(slice);
            continue;
        }
        let p = ProxProblem::new(slice, lambda, si)?;
        shrink.push(shrink_factor(&p));
        pruned.push(group_prox(&p));
    }
    let w_pruned = g.assemble(&pruned)?;
    let pruned_groups = (0..g.len()).filter(|&i| shrink[i] == 0.0).collect();
    Ok(PruneSolution {
        w_pruned: ParamVector::new(w_pruned),
        s: s.to_vec(),
        shrink,
        lambda,
        pruned_groups,
        warnings,
    })
}

pub fn exact_sdp_prune(w_star: &[f64], g: &GroupPartition, sub: &FlatSubspace, lambda: f64) -> Result<PruneSolution> {
    let s = direction_factors(w_star, g, sub)?;
    prune_with_factors(w_star, g, &s, lambda)
}

/// Per-group comparison of `s_i E(w*_i)` with `(Pi E_G(w*))_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    /// `|s_i - <E(w*_i), (Pi E_G)_i>|`
    pub parallel: Vec<f64>,
    /// `|(Pi E_G)_i - s_i E(w*_i)|`
    pub orthogonal: Vec<f64>,
}

impl PerturbationReport {
    pub fn max_parallel(&self) -> f64 {
        self.parallel.iter().fold(0.0, |m, x| m.max(*x))
    }

    pub fn max_orthogonal(&self) -> f64 {
        self.orthogonal.iter().fold(0.0, |m, x| m.max(*x))
    }
}

pub fn perturbation_check(
    sol: &PruneSolution,
    w_star: &[f64],
    g: &GroupPartition,
    sub: &FlatSubspace,
) -> Result<PerturbationReport> {
    if let Some(&i) = sol.pruned_groups.first() {
        return Err(Error::Domain(format!(
            "group {i} is pruned to zero; the perturbation identity only holds off the clamp"
        )));
    }
    check_len("direction factor count", g.len(), sol.s.len())?;
    let e = normalize_groups(w_star, g)?;
    let pe = project(sub, &e)?;
    let mut parallel = Vec::with_capacity(g.len());
    let mut orthogonal = Vec::with_capacity(g.len());
    for (i, group) in g.groups().iter().enumerate() {
        let ei: Vec<f64> = group.iter().map(|&j| e[j]).collect();
        let pi: Vec<f64> = group.iter().map(|&j| pe[j]).collect();
        let si = sol.s[i];
        parallel.push((si - dot(&ei, &pi)).abs());
        let resid: Vec<f64> = pi.iter().zip(&ei).map(|(p, e)| p - si * e).collect();
        orthogonal.push(norm(&resid));
    }
    Ok(PerturbationReport {
        parallel,
        orthogonal,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessRow {
    pub lambda: f64,
    /// `loss(w_pruned) - loss(w*)` under directional pruning.
    pub sdp_delta: f64,
    /// Same with `s_i = 1` for every group (plain group lasso shrinkage).
    pub naive_delta: f64,
    /// No group of the directional solution has hit the clamp.
    pub pre_clamp: bool,
    pub sdp_pruned_groups: usize,
    pub naive_pruned_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessTable {
    pub rows: Vec<FlatnessRow>,
    pub gradient_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl FlatnessTable {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&[
            "lambda",
            "sdp_delta",
            "naive_delta",
            "pre_clamp",
            "sdp_pruned_groups",
            "naive_pruned_groups",
        ]);
        for r in &self.rows {
            t.push(vec![
                fmt(r.lambda),
                fmt(r.sdp_delta),
                fmt(r.naive_delta),
                r.pre_clamp.to_string(),
                r.sdp_pruned_groups.to_string(),
                r.naive_pruned_groups.to_string(),
            ]);
        }
        t
    }
}

/// Loss change of directional and naive pruning over `lambda = 0` followed by
/// `n_lambdas` log-spaced values in `[lambda_min, lambda_max]`.
#[allow(clippy::too_many_arguments)]
pub fn loss_flatness_check(
    model: &Model,
    dataset: &Dataset,
    w_star: &[f64],
    g: &GroupPartition,
    sub: &FlatSubspace,
    (lambda_min, lambda_max): (f64, f64),
    n_lambdas: usize,
    grad_tol: f64,
) -> Result<FlatnessTable> {
    if !(lambda_min > 0.0 && lambda_max >= lambda_min) || n_lambdas == 0 {
        return Err(Error::Config(format!(
            "invalid lambda grid [{lambda_min}, {lambda_max}] x {n_lambdas}"
        )));
    }
    let mut lambdas = vec![0.0];
    lambdas.extend((0..n_lambdas).map(|k| {
        if n_lambdas == 1 {
            lambda_min
        } else {
            lambda_min * (lambda_max / lambda_min).powf(k as f64 / (n_lambdas - 1) as f64)
        }
    }));
    flatness_table(model, dataset, w_star, g, sub, &lambdas, grad_tol)
}

/// Loss change of directional and naive pruning at each listed `lambda`.
pub fn flatness_table(
    model: &Model,
    dataset: &Dataset,
    w_star: &[f64],
    g: &GroupPartition,
    sub: &FlatSubspace,
    lambdas: &[f64],
    grad_tol: f64,
) -> Result<FlatnessTable> {
    let base = model.full_loss(w_star, dataset)?;
    let gradient_norm = norm(&model.full_gradient(w_star, dataset)?);
    let warning = (gradient_norm > grad_tol).then(|| {
        format!("reference point is not a minimum: |grad| = {gradient_norm:e} > {grad_tol:e}")
    });
    let s = direction_factors(w_star, g, sub)?;
    let ones = vec![1.0; g.len()];
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let sdp = prune_with_factors(w_star, g, &s, lambda)?;
        let naive = prune_with_factors(w_star, g, &ones, lambda)?;
        rows.push(FlatnessRow {
            lambda,
            sdp_delta: model.full_loss(&sdp.w_pruned, dataset)? - base,
            naive_delta: model.full_loss(&naive.w_pruned, dataset)? - base,
            pre_clamp: sdp.pruned_groups.is_empty(),
            sdp_pruned_groups: sdp.pruned_groups.len(),
            naive_pruned_groups: naive.pruned_groups.len(),
        });
    }
    Ok(FlatnessTable {
        rows,
        gradient_norm,
        warning,
    })
}

/// `index,eigenvalue` CSV of a spectrum.
pub fn write_spectrum_csv(path: &Path, eigenvalues: &[f64], preamble: Option<&str>) -> Result<()> {
    let mut t = Table::new(&["index", "eigenvalue"]);
    for (i, l) in eigenvalues.iter().enumerate() {
        t.push(vec![i.to_string(), fmt(*l)]);
    }
    t.write(path, preamble)
}
