use serde::{Deserialize, Serialize};

use super::{axpy, dot, DenseMatrix};
use crate::error::{check_len, Error, Result};

const MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-9;

/// Spectral decomposition `A = P diag(eigenvalues) P^T` of a real symmetric
/// matrix. Eigenvalues are ascending; ties keep their original diagonal order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Columns are unit eigenvectors, in the order of `eigenvalues`.
    pub eigenvectors: DenseMatrix,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn max_abs_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0, |m, l| m.max(l.abs()))
    }

    /// `P f(Lambda) P^T`
    pub fn spectral_map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        let n = self.dim();
        let p = &self.eigenvectors;
        let fl: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let mut out = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += p[(i, k)] * fl[k] * p[(j, k)];
                }
                out[(i, j)] = acc;
                out[(j, i)] = acc;
            }
        }
        out
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        self.spectral_map(|l| l)
    }

    /// `exp(-A t)`
    pub fn exp_neg(&self, t: f64) -> DenseMatrix {
        self.spectral_map(|l| (-l * t).exp())
    }

    /// `exp(-A t) x` without forming the matrix.
    pub fn apply_exp_neg(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        check_len("apply_exp_neg", self.dim(), x.len())?;
        let p = &self.eigenvectors;
        let coeffs = p.tmatvec(x)?;
        let mut out = vec![0.0; self.dim()];
        for (k, c) in coeffs.iter().enumerate() {
            let scale = c * (-self.eigenvalues[k] * t).exp();
            if scale != 0.0 {
                axpy(scale, &p.column(k), &mut out);
            }
        }
        Ok(out)
    }
}

fn check_symmetric(a: &DenseMatrix) -> Result<()> {
    if !a.is_square() {
        return Err(Error::dim("symmetric matrix (square)", a.rows(), a.cols()));
    }
    let asym = a.asymmetry();
    if !(asym <= SYMMETRY_TOL * a.max_abs().max(1.0)) {
        return Err(Error::Symmetry { asymmetry: asym });
    }
    if !a.is_finite() {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eigen(a: &DenseMatrix) -> Result<EigenDecomposition> {
    check_symmetric(a)?;
    let n = a.rows();
    let mut m = a.symmetrized()?;
    let mut v = DenseMatrix::identity(n);
    let total = m.frobenius_norm();

    let mut converged = n <= 1;
    for sweep in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| m[(p, q)] * m[(p, q)])
            .sum();
        if off.sqrt() <= 1e-15 * total || off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                // Late sweeps: drop entries below the diagonal's resolution.
                if sweep > 3 {
                    let g = 100.0 * apq.abs();
                    if app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                        m[(p, q)] = 0.0;
                        m[(q, p)] = 0.0;
                        continue;
                    }
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate_columns(&mut m, p, q, c, s);
                rotate_rows(&mut m, p, q, c, s);
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                rotate_columns(&mut v, p, q, c, s);
            }
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi iteration did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let diag = m.diag();
    let mut order: Vec<usize> = (0..n).collect();
    // sort_by is stable, so equal eigenvalues keep index order.
    order.sort_by(|&i, &j| diag[i].total_cmp(&diag[j]));
    let eigenvalues = order.iter().map(|&k| diag[k]).collect();
    let eigenvectors = DenseMatrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

fn rotate_columns(m: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m.rows() {
        let mkp = m[(k, p)];
        let mkq = m[(k, q)];
        m[(k, p)] = c * mkp - s * mkq;
        m[(k, q)] = s * mkp + c * mkq;
    }
}

fn rotate_rows(m: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m.cols() {
        let mpk = m[(p, k)];
        let mqk = m[(q, k)];
        m[(p, k)] = c * mpk - s * mqk;
        m[(q, k)] = s * mpk + c * mqk;
    }
}

/// `exp(-h t)` for symmetric `h`, via its eigendecomposition. This is the
/// principal matrix solution `Phi(s + t, s)` of `x' = -h x` for constant `h`.
pub fn matrix_exp_scaled(h: &DenseMatrix, t: f64) -> Result<DenseMatrix> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("time must be finite and >= 0, got {t}")));
    }
    Ok(sym_eigen(h)?.exp_neg(t))
}

/// Max deviation of `P^T P` from the identity.
pub fn orthonormality_defect(p: &DenseMatrix) -> f64 {
    let k = p.cols();
    let mut worst: f64 = 0.0;
    for a in 0..k {
        let ca = p.column(a);
        for b in a..k {
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((dot(&ca, &p.column(b)) - target).abs());
        }
    }
    worst
}
