//! The group proximal operator `argmin_w 1/2 |w* - w|^2 + lambda s |w|` in
//! closed form, plus independent brute-force oracles for it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::linalg::{norm, scaled, sub, Rng};
use crate::table::{fmt, fmt_opt, Table};

/// Default grid resolution of [`brute_force_prox`].
pub const DEFAULT_GRID: usize = 1_000_000;

const GRID_CHUNK: usize = 1 << 14;
const INV_PHI: f64 = 0.618_033_988_749_894_8;

#[derive(Debug, Clone, PartialEq)]
pub struct ProxProblem {
    pub w_star: Vec<f64>,
    pub lambda: f64,
    /// Direction factor; any sign.
    pub s: f64,
}

impl ProxProblem {
    pub fn new(w_star: Vec<f64>, lambda: f64, s: f64) -> Result<Self> {
        check_finite("prox center", &w_star)?;
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be > 0, got {lambda}")));
        }
        if !s.is_finite() {
            return Err(Error::Numeric(format!("direction factor is {s}")));
        }
        Ok(ProxProblem { w_star, lambda, s })
    }

    /// `lambda * s`, the only combination the solution depends on.
    pub fn kappa(&self) -> f64 {
        self.lambda * self.s
    }

    /// `1/2 |w* - x|^2 + lambda s |x|`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let r = sub(&self.w_star, x);
        0.5 * crate::linalg::dot(&r, &r) + self.kappa() * norm(x)
    }
}

/// Closed form `(1 - lambda s / |w*|)_+ w*`, and `0` for `w* = 0`.
pub fn group_prox(p: &ProxProblem) -> Vec<f64> {
    let r = norm(&p.w_star);
    if r == 0.0 {
        return vec![0.0; p.w_star.len()];
    }
    let factor = (1.0 - p.kappa() / r).max(0.0);
    scaled(factor, &p.w_star)
}

/// Shrink factor `(1 - lambda s / |w*|)_+` applied by [`group_prox`].
pub fn shrink_factor(p: &ProxProblem) -> f64 {
    let r = norm(&p.w_star);
    if r == 0.0 {
        0.0
    } else {
        (1.0 - p.kappa() / r).max(0.0)
    }
}

/// Minimizes the objective over `alpha * w*/|w*|` by a uniform grid of
/// `grid` points on `[-(3|w*| + |lambda s|), 3|w*| + |lambda s|]` followed by
/// golden-section refinement of the best cell. Ties go to the smallest alpha.
pub fn brute_force_prox(p: &ProxProblem, grid: usize) -> Result<Vec<f64>> {
    let r = norm(&p.w_star);
    if r == 0.0 {
        return Err(Error::Domain("brute-force oracle needs w* != 0".into()));
    }
    if grid < 3 {
        return Err(Error::Config("grid needs at least 3 points".into()));
    }
    let kappa = p.kappa();
    let e = scaled(1.0 / r, &p.w_star);
    let half = 3.0 * r + kappa.abs();
    let step = 2.0 * half / (grid - 1) as f64;
    let alpha_at = |k: usize| -half + k as f64 * step;
    // along the ray the objective is exactly 1/2 (r - a)^2 + kappa |a|
    let f1 = |a: f64| 0.5 * (r - a) * (r - a) + kappa * a.abs();
    let n_chunks = grid.div_ceil(GRID_CHUNK);
    let (_, best) = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * GRID_CHUNK;
            let hi = (lo + GRID_CHUNK).min(grid);
            let mut best = (f64::INFINITY, lo);
            for k in lo..hi {
                let v = f1(alpha_at(k));
                if v < best.0 {
                    best = (v, k);
                }
            }
            best
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((f64::INFINITY, 0), |acc, b| if b.0 < acc.0 { b } else { acc });
    let fv = |a: f64| p.objective(&scaled(a, &e));
    let mut a = alpha_at(best.saturating_sub(1));
    let mut b = alpha_at((best + 1).min(grid - 1));
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let (mut f_x1, mut f_x2) = (fv(x1), fv(x2));
    for _ in 0..200 {
        if b - a <= 1e-15 * half {
            break;
        }
        if f_x1 <= f_x2 {
            b = x2;
            x2 = x1;
            f_x2 = f_x1;
            x1 = b - INV_PHI * (b - a);
            f_x1 = fv(x1);
        } else {
            a = x1;
            x1 = x2;
            f_x1 = f_x2;
            x2 = a + INV_PHI * (b - a);
            f_x2 = fv(x2);
        }
    }
    // the kink at 0 can sit inside the final bracket
    let mut alpha = 0.5 * (a + b);
    let mut f_best = fv(alpha);
    for cand in [alpha_at(best), 0.0] {
        if cand >= a && cand <= b {
            let fc = fv(cand);
            if fc < f_best {
                alpha = cand;
                f_best = fc;
            }
        }
    }
    Ok(scaled(alpha, &e))
}

/// Full-dimensional oracle for small groups: gradient descent with
/// backtracking from `restarts` random starts plus the origin, no colinearity
/// assumption.
pub fn multistart_prox(p: &ProxProblem, restarts: usize, seed: u64) -> Result<Vec<f64>> {
    let d = p.w_star.len();
    if d == 0 || d > 3 {
        return Err(Error::Domain(format!(
            "multi-start oracle supports 1 to 3 dimensions, got {d}"
        )));
    }
    let kappa = p.kappa();
    let scale = norm(&p.w_star) + kappa.abs() + 1.0;
    let mut rng = Rng::new(seed);
    let mut best = vec![0.0; d];
    let mut f_best = p.objective(&best);
    for _ in 0..restarts {
        let mut x: Vec<f64> = (0..d).map(|_| 3.0 * scale * rng.uniform_in(-1.0, 1.0)).collect();
        let mut fx = p.objective(&x);
        let mut step = 1.0;
        for _ in 0..5000 {
            let nx = norm(&x);
            if nx == 0.0 {
                break;
            }
            let g: Vec<f64> = (0..d)
                .map(|j| x[j] - p.w_star[j] + kappa * x[j] / nx)
                .collect();
            let gn = norm(&g);
            if gn < 1e-14 * scale {
                break;
            }
            let mut accepted = false;
            while step > 1e-18 {
                let trial: Vec<f64> = (0..d).map(|j| x[j] - step * g[j]).collect();
                let ft = p.objective(&trial);
                if ft <= fx - 0.25 * step * gn * gn {
                    x = trial;
                    fx = ft;
                    accepted = true;
                    step = (step * 2.0).min(1.0);
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if fx < f_best {
            f_best = fx;
            best = x;
        }
    }
    Ok(best)
}

/// Objective values at the two stationary points `(1 - lambda s/|w*|) w*`
/// and `(1 + lambda s/|w*|) w*` of the `s < 0` case.
pub fn stationary_values(p: &ProxProblem) -> Result<(f64, f64)> {
    if p.s >= 0.0 {
        return Err(Error::Domain(format!("stationary_values needs s < 0, got {}", p.s)));
    }
    let (sp1, sp2) = stationary_points(p)?;
    Ok((p.objective(&sp1), p.objective(&sp2)))
}

pub fn stationary_points(p: &ProxProblem) -> Result<(Vec<f64>, Vec<f64>)> {
    let r = norm(&p.w_star);
    if r == 0.0 {
        return Err(Error::Domain("stationary points need w* != 0".into()));
    }
    let k = p.kappa() / r;
    Ok((scaled(1.0 - k, &p.w_star), scaled(1.0 + k, &p.w_star)))
}

/// One randomized oracle comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxCase {
    pub case: usize,
    pub dim: usize,
    pub lambda: f64,
    pub s: f64,
    pub norm_w: f64,
    /// `|group_prox - brute_force_prox| / (1 + |w*|)`.
    pub residual: f64,
    /// Same against the multi-start oracle, for dims up to 3.
    pub multistart_residual: Option<f64>,
    /// `f(sp1) < f(sp2)`; only for `s < 0`.
    pub stationary_ok: Option<bool>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxSuiteReport {
    pub seed: u64,
    pub tolerance: f64,
    pub cases: Vec<ProxCase>,
}

impl ProxSuiteReport {
    pub fn failures(&self) -> usize {
        self.cases.iter().filter(|c| !c.pass).count()
    }

    pub fn max_residual(&self) -> f64 {
        self.cases.iter().fold(0.0, |m, c| m.max(c.residual))
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&[
            "case", "dim", "lambda", "s", "norm_w", "residual", "multistart_residual", "stationary_ok", "pass",
        ]);
        for c in &self.cases {
            t.push(vec![
                c.case.to_string(),
                c.dim.to_string(),
                fmt(c.lambda),
                fmt(c.s),
                fmt(c.norm_w),
                fmt(c.residual),
                fmt_opt(c.multistart_residual),
                c.stationary_ok.map_or_else(String::new, |b| b.to_string()),
                c.pass.to_string(),
            ]);
        }
        t
    }
}

/// Draws `n_cases` problems cycling through `s > 0`, `s = 0` and `s < 0` with
/// dims 1 to 20 and `|lambda s| <= 3 |w*|`, and checks the closed form against
/// the oracles.
pub fn prox_suite(n_cases: usize, seed: u64, grid: usize, tolerance: f64) -> Result<ProxSuiteReport> {
    let mut rng = Rng::new(seed);
    let mut problems = Vec::with_capacity(n_cases);
    for k in 0..n_cases {
        let dim = 1 + rng.below(20);
        let scale = rng.uniform_in(0.1, 5.0);
        let w: Vec<f64> = rng.normals(dim).into_iter().map(|x| x * scale).collect();
        let lambda = rng.uniform_in(0.01, 3.0);
        let kappa_max = 3.0 * norm(&w);
        let s = match k % 3 {
            0 => rng.uniform_in(0.001, 1.0) * kappa_max / lambda,
            1 => 0.0,
            _ => -rng.uniform_in(0.001, 1.0) * kappa_max / lambda,
        };
        let restart_seed = rng.next_u64();
        problems.push((ProxProblem::new(w, lambda, s)?, restart_seed));
    }
    let cases = problems
        .iter()
        .enumerate()
        .map(|(case, (p, restart_seed))| {
            let exact = group_prox(p);
            let r = norm(&p.w_star);
            let denom = 1.0 + r;
            let residual = norm(&sub(&exact, &brute_force_prox(p, grid)?)) / denom;
            let multistart_residual = if p.w_star.len() <= 3 {
                Some(norm(&sub(&exact, &multistart_prox(p, 32, *restart_seed)?)) / denom)
            } else {
                None
            };
            let stationary_ok = if p.s < 0.0 {
                let (f1, f2) = stationary_values(p)?;
                Some(f1 < f2)
            } else {
                None
            };
            let pass = residual <= tolerance
                && multistart_residual.is_none_or(|m| m <= tolerance)
                && stationary_ok != Some(false);
            Ok(ProxCase {
                case,
                dim: p.w_star.len(),
                lambda: p.lambda,
                s: p.s,
                norm_w: r,
                residual,
                multistart_residual,
                stationary_ok,
                pass,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProxSuiteReport { seed, tolerance, cases })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::linalg::{max_abs_diff, Rng};

    fn prob(w: &[f64], kappa: f64) -> ProxProblem {
        ProxProblem::new(w.to_vec(), 1.0, kappa).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(group_prox(&prob(&[3.0, 4.0], 0.0)), vec![3.0, 4.0]);
        assert_eq!(group_prox(&prob(&[3.0, 4.0], 5.0)), vec![0.0, 0.0]);
        assert_eq!(group_prox(&prob(&[3.0, 4.0], 2.5)), vec![1.5, 2.0]);
        assert_eq!(group_prox(&prob(&[3.0, 4.0], -2.5)), vec![4.5, 6.0]);
        assert_eq!(group_prox(&prob(&[0.0, 0.0], -2.5)), vec![0.0, 0.0]);
        assert_eq!(group_prox(&ProxProblem::new(vec![3.0, 4.0], 0.5, 5.0).unwrap()), vec![1.5, 2.0]);
    }

    #[test]
    fn invalid_problems() {
        assert!(ProxProblem::new(vec![1.0], 0.0, 1.0).is_err());
        assert!(ProxProblem::new(vec![f64::NAN], 1.0, 1.0).is_err());
        assert!(matches!(brute_force_prox(&prob(&[0.0, 0.0], 1.0), 1000), Err(Error::Domain(_))));
        assert!(matches!(stationary_values(&prob(&[1.0], 0.5)), Err(Error::Domain(_))));
    }

    #[test]
    fn brute_force_examples() {
        let p = prob(&[3.0, 4.0], 0.0);
        assert!(max_abs_diff(&brute_force_prox(&p, DEFAULT_GRID).unwrap(), &[3.0, 4.0]) < 1e-6);
        for kappa in [2.5, 5.0, 7.0, -2.5, -6.0, -15.0] {
            let p = prob(&[3.0, 4.0], kappa);
            let bf = brute_force_prox(&p, DEFAULT_GRID).unwrap();
            assert!(max_abs_diff(&bf, &group_prox(&p)) < 1e-6, "kappa {kappa}: {bf:?}");
        }
    }

    #[test]
    fn stationary_value_examples() {
        let p = prob(&[3.0, 4.0], -2.5);
        let (f1, f2) = stationary_values(&p).unwrap();
        assert!((f1 + 15.625).abs() < 1e-12);
        assert!((f2 + 3.125).abs() < 1e-12);
        let (sp1, sp2) = stationary_points(&p).unwrap();
        assert!(((norm(&sp1) - 5.0).abs() - 2.5).abs() < 1e-12);
        assert!(((norm(&sp2) - 5.0).abs() - 2.5).abs() < 1e-12);
        // larger-norm point wins and is what group_prox returns
        assert!(max_abs_diff(&sp1, &group_prox(&p)) < 1e-12);
    }

    #[test]
    fn multistart_confirms_colinearity() {
        let mut rng = Rng::new(5);
        for case in 0..200 {
            let d = 1 + case % 3;
            let w = rng.normals(d);
            let r = norm(&w);
            let kappa = rng.uniform_in(-3.0 * r, 3.0 * r);
            let p = prob(&w, kappa);
            let ms = multistart_prox(&p, 20, case as u64).unwrap();
            let cf = group_prox(&p);
            assert!(max_abs_diff(&ms, &cf) < 1e-5 * (1.0 + r), "case {case}: {ms:?} vs {cf:?}");
        }
        assert!(multistart_prox(&prob(&[1.0; 4], 1.0), 20, 0).is_err());
    }

    proptest! {
        #[test]
        fn colinear_and_threshold_exact(w in proptest::collection::vec(-10.0f64..10.0, 1..20), t in -3.0f64..3.0) {
            let r = norm(&w);
            prop_assume!(r > 1e-6);
            let kappa = t * r;
            let out = group_prox(&prob(&w, kappa));
            let factor = shrink_factor(&prob(&w, kappa));
            if kappa >= 0.0 {
                prop_assert!((0.0..=1.0).contains(&factor));
            } else {
                prop_assert!(factor >= 1.0);
            }
            prop_assert_eq!(out.iter().all(|&x| x == 0.0), kappa >= r);
            for (o, wi) in out.iter().zip(&w) {
                prop_assert_eq!(*o, factor * wi);
            }
        }

        #[test]
        fn convex_case_is_optimal(w in proptest::collection::vec(-5.0f64..5.0, 1..10), t in 0.0f64..2.0, seed in any::<u64>()) {
            let r = norm(&w);
            prop_assume!(r > 1e-6);
            let p = prob(&w, t * r);
            let x = group_prox(&p);
            let fx = p.objective(&x);
            let mut rng = Rng::new(seed);
            for _ in 0..1000 {
                let y: Vec<f64> = x.iter().map(|xi| xi + rng.normal() * 0.5).collect();
                prop_assert!(fx <= p.objective(&y) + 1e-12);
            }
        }

        #[test]
        fn sp1_beats_sp2(w in proptest::collection::vec(-5.0f64..5.0, 1..10), lambda in 0.01f64..5.0, s in -3.0f64..-0.001) {
            prop_assume!(norm(&w) > 1e-6);
            let p = ProxProblem::new(w, lambda, s).unwrap();
            let (f1, f2) = stationary_values(&p).unwrap();
            prop_assert!(f1 < f2);
        }
    }

    #[test]
    fn suite_is_seeded_and_self_checking() {
        let a = prox_suite(60, 3, 100_000, 1e-6).unwrap();
        let b = prox_suite(60, 3, 100_000, 1e-6).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.failures(), 0);
        assert_eq!(a.cases.iter().filter(|c| c.s == 0.0).count(), 20);
        assert_eq!(a.cases.iter().filter(|c| c.stationary_ok.is_some()).count(), 20);
        let strict = prox_suite(60, 3, 100_000, 0.0).unwrap();
        assert!(strict.failures() > 0);
        assert_eq!(a.to_table().rows.len(), 60);
    }
}
