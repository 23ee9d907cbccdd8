use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::linalg::{dot, norm, orthonormalize_pair, sub, Rng};
use crate::model::{Batch, Dataset, Model};
use crate::param::ParamVector;
use crate::table::{fmt, fmt_opt, Table};

/// Quadratic Bézier curve with fixed endpoints and a trainable control point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BezierCurve {
    pub a: ParamVector,
    pub b: ParamVector,
    pub theta: ParamVector,
}

impl BezierCurve {
    /// Control point initialized at the chord midpoint.
    pub fn new(a: ParamVector, b: ParamVector) -> Result<Self> {
        check_len("curve endpoints", a.len(), b.len())?;
        let theta = a.iter().zip(b.iter()).map(|(x, y)| 0.5 * (x + y)).collect::<Vec<_>>();
        Ok(BezierCurve { a, b, theta: ParamVector::new(theta) })
    }

    pub fn point(&self, tau: f64) -> ParamVector {
        if tau == 0.0 {
            return self.a.clone();
        }
        if tau == 1.0 {
            return self.b.clone();
        }
        let (ca, ct, cb) = ((1.0 - tau).powi(2), 2.0 * tau * (1.0 - tau), tau * tau);
        (0..self.a.len())
            .map(|j| ca * self.a[j] + ct * self.theta[j] + cb * self.b[j])
            .collect::<Vec<_>>()
            .into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BezierParams {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Number of uniform `tau` samples used for the reported profile.
    #[serde(default = "default_profile_points")]
    pub profile_points: usize,
}

fn default_profile_points() -> usize {
    101
}

impl BezierParams {
    pub fn new(epochs: usize, lr: f64, batch_size: usize) -> Self {
        BezierParams { epochs, lr, batch_size, profile_points: default_profile_points() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BezierResult {
    pub curve: BezierCurve,
    pub max_loss: f64,
    pub endpoint_losses: (f64, f64),
    /// `(tau, full-batch loss)` on the uniform grid.
    pub profile: Vec<(f64, f64)>,
}

impl BezierResult {
    /// Excess of the highest curve loss over the higher endpoint.
    pub fn barrier(&self) -> f64 {
        self.max_loss - self.endpoint_losses.0.max(self.endpoint_losses.1)
    }

    /// Columns `tau,loss`.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["tau", "loss"]);
        for (tau, loss) in &self.profile {
            t.push(vec![fmt(*tau), fmt(*loss)]);
        }
        t
    }
}

/// Trains the control point by SGD with one uniformly drawn `tau` per step.
pub fn bezier_connect(
    model: &Model,
    dataset: &Dataset,
    wa: &[f64],
    wb: &[f64],
    params: &BezierParams,
    rng: &mut Rng,
) -> Result<BezierResult> {
    check_len("endpoint A", model.dim(), wa.len())?;
    check_len("endpoint B", model.dim(), wb.len())?;
    check_finite("endpoint A", wa)?;
    check_finite("endpoint B", wb)?;
    if !(params.lr > 0.0 && params.lr.is_finite()) {
        return Err(Error::Config(format!("curve learning rate must be positive, got {}", params.lr)));
    }
    if params.profile_points < 2 {
        return Err(Error::Config("curve profile needs at least two points".into()));
    }
    let n = model.data(dataset).len();
    if params.batch_size == 0 || params.batch_size > n {
        return Err(Error::Config(format!(
            "curve batch size must lie in [1, {n}], got {}",
            params.batch_size
        )));
    }
    let mut curve = BezierCurve::new(ParamVector::from(wa), ParamVector::from(wb))?;
    let mut step = 0usize;
    for _ in 0..params.epochs {
        let order = rng.permutation(n);
        for chunk in order.chunks(params.batch_size) {
            let tau = rng.uniform();
            let batch = Batch::new(chunk.to_vec(), n)?;
            let grad = model
                .grad(&curve.point(tau), dataset, &batch)
                .map_err(|e| diverged(step, e))?;
            let weight = params.lr * 2.0 * tau * (1.0 - tau);
            for (t, g) in curve.theta.iter_mut().zip(grad.iter()) {
                *t -= weight * g;
            }
            if curve.theta.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    detail: "non-finite curve control point".into(),
                });
            }
            step += 1;
        }
    }
    let m = params.profile_points;
    let taus: Vec<f64> = (0..m).map(|k| k as f64 / (m - 1) as f64).collect();
    let losses = taus
        .par_iter()
        .map(|&tau| model.full_loss(&curve.point(tau), dataset))
        .collect::<Result<Vec<f64>>>()?;
    let profile: Vec<(f64, f64)> = taus.into_iter().zip(losses.iter().copied()).collect();
    let max_loss = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(BezierResult {
        endpoint_losses: (losses[0], losses[m - 1]),
        curve,
        max_loss,
        profile,
    })
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(detail) => Error::Divergence { step, detail },
        other => other,
    }
}

/// Loss (and test error) on a regular grid in the plane through three points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneGrid {
    pub origin: ParamVector,
    pub axes: (Vec<f64>, Vec<f64>),
    pub u_range: (f64, f64),
    pub v_range: (f64, f64),
    pub resolution: (usize, usize),
    /// Row-major in `u`: `values[iu * nv + iv]`.
    pub values: Vec<f64>,
    pub test_err: Option<Vec<f64>>,
    /// `(u, v, loss)` of the three defining points.
    pub anchors: Vec<(f64, f64, f64)>,
}

impl PlaneGrid {
    pub fn u(&self, iu: usize) -> f64 {
        lin(self.u_range, self.resolution.0, iu)
    }

    pub fn v(&self, iv: usize) -> f64 {
        lin(self.v_range, self.resolution.1, iv)
    }

    pub fn point(&self, u: f64, v: f64) -> ParamVector {
        plane_point(&self.origin, &self.axes, u, v)
    }

    pub fn value(&self, iu: usize, iv: usize) -> f64 {
        self.values[iu * self.resolution.1 + iv]
    }

    /// Columns `u,v,loss,test_err`.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["u", "v", "loss", "test_err"]);
        let (nu, nv) = self.resolution;
        for iu in 0..nu {
            for iv in 0..nv {
                let k = iu * nv + iv;
                t.push(vec![
                    fmt(self.u(iu)),
                    fmt(self.v(iv)),
                    fmt(self.values[k]),
                    fmt_opt(self.test_err.as_ref().map(|e| e[k])),
                ]);
            }
        }
        t
    }

    /// Columns `anchor,u,v,loss`.
    pub fn anchor_table(&self) -> Table {
        let mut t = Table::new(&["anchor", "u", "v", "loss"]);
        for (k, (u, v, loss)) in self.anchors.iter().enumerate() {
            t.push(vec![(k + 1).to_string(), fmt(*u), fmt(*v), fmt(*loss)]);
        }
        t
    }
}

fn lin((lo, hi): (f64, f64), n: usize, i: usize) -> f64 {
    if i + 1 == n {
        hi
    } else {
        lo + (hi - lo) * i as f64 / (n - 1) as f64
    }
}

fn plane_point(origin: &[f64], axes: &(Vec<f64>, Vec<f64>), u: f64, v: f64) -> ParamVector {
    origin
        .iter()
        .zip(axes.0.iter().zip(&axes.1))
        .map(|(o, (a, b))| o + u * a + v * b)
        .collect::<Vec<_>>()
        .into()
}

/// Evaluates the full-batch loss on a `(nu, nv)` grid spanning the triangle
/// `w1, w2, w3` widened by `margin` times its extent on each side. Cells are
/// evaluated independently; the result does not depend on traversal order.
#[allow(clippy::too_many_arguments)]
pub fn plane_contour(
    model: &Model,
    dataset: &Dataset,
    test: Option<&Dataset>,
    w1: &[f64],
    w2: &[f64],
    w3: &[f64],
    resolution: (usize, usize),
    margin: f64,
) -> Result<PlaneGrid> {
    for (name, w) in [("w1", w1), ("w2", w2), ("w3", w3)] {
        check_len(name, model.dim(), w.len())?;
        check_finite(name, w)?;
    }
    let (nu, nv) = resolution;
    if nu < 2 || nv < 2 {
        return Err(Error::Config(format!("grid resolution must be at least 2x2, got {nu}x{nv}")));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::Config(format!("margin must be >= 0, got {margin}")));
    }
    let (d2, d3) = (sub(w2, w1), sub(w3, w1));
    let axes = orthonormalize_pair(&d2, &d3)?;
    let coords = [(0.0, 0.0), (norm(&d2), 0.0), (dot(&d3, &axes.0), dot(&d3, &axes.1))];
    let span = |f: fn(&(f64, f64)) -> f64| {
        let lo = coords.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = coords.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let pad = margin * (hi - lo);
        (lo - pad, hi + pad)
    };
    let u_range = span(|c| c.0);
    let v_range = span(|c| c.1);
    let origin = ParamVector::from(w1);

    let cells: Vec<(f64, f64)> = (0..nu)
        .flat_map(|iu| (0..nv).map(move |iv| (lin(u_range, nu, iu), lin(v_range, nv, iv))))
        .collect();
    let evals = cells
        .par_iter()
        .map(|&(u, v)| {
            let w = plane_point(&origin, &axes, u, v);
            let loss = model.full_loss(&w, dataset)?;
            let err = match test {
                Some(t) => model.accuracy(&w, t)?.map(|a| 1.0 - a),
                None => None,
            };
            Ok((loss, err))
        })
        .collect::<Result<Vec<(f64, Option<f64>)>>>()?;
    let values = evals.iter().map(|e| e.0).collect();
    let test_err = evals.iter().map(|e| e.1).collect::<Option<Vec<f64>>>();

    let anchors = coords
        .iter()
        .map(|&(u, v)| Ok((u, v, model.full_loss(&plane_point(&origin, &axes, u, v), dataset)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PlaneGrid {
        origin,
        axes,
        u_range,
        v_range,
        resolution,
        values,
        test_err,
        anchors,
    })
}
