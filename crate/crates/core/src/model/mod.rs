//! Differentiable models (quadratic, linear regression, MLP), their losses and
//! exact reverse-mode gradients, plus finite-difference Hessians and an RK4
//! integrator for the full-batch gradient flow.

mod data;
mod network;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::grouping::{LayerShape, ParamLayout};
use crate::linalg::{DenseMatrix, Rng};

pub use crate::param::ParamVector;
pub use data::{
    flat_linear_regression, load_csv, load_idx, make_teacher_student, two_moons,
    write_idx_images, write_idx_labels, FlatRegression, TeacherStudent,
};

/// Default cap on the parameter count for dense Hessians.
pub const DEFAULT_HESSIAN_CAP: usize = 2000;

/// Samples per serial accumulation chunk; chunks are reduced pairwise.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Quadratic,
    LinearRegression,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation; ReLU uses 0 at 0.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `1/2 |h - y|^2` per sample.
    Mse,
    SoftmaxCrossEntropy,
}

/// Explicit design matrix and targets for the quadratic model
/// `1/2 |X w - y|^2 / N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticData {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// `[in, hidden..., out]` for MLPs, `[in, out]` for linear regression.
    /// Ignored for the quadratic model, whose shape comes from its data.
    #[serde(default)]
    pub layer_sizes: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic_data: Option<QuadraticData>,
}

fn default_activation() -> Activation {
    Activation::Identity
}

fn default_loss() -> LossKind {
    LossKind::Mse
}

impl ModelSpec {
    pub fn mlp(layer_sizes: Vec<usize>, activation: Activation, loss: LossKind) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            layer_sizes,
            activation,
            loss,
            quadratic_data: None,
        }
    }

    pub fn linear_regression(n_in: usize, n_out: usize) -> Self {
        ModelSpec {
            kind: ModelKind::LinearRegression,
            layer_sizes: vec![n_in, n_out],
            activation: Activation::Identity,
            loss: LossKind::Mse,
            quadratic_data: None,
        }
    }

    pub fn quadratic(x: Vec<Vec<f64>>, y: Vec<f64>) -> Self {
        ModelSpec {
            kind: ModelKind::Quadratic,
            layer_sizes: Vec::new(),
            activation: Activation::Identity,
            loss: LossKind::Mse,
            quadratic_data: Some(QuadraticData { x, y }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    /// `N x out_dim` regression targets.
    Values(DenseMatrix),
    Classes { labels: Vec<usize>, n_classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: DenseMatrix,
    pub targets: Targets,
    pub name: String,
}

impl Dataset {
    pub fn new(inputs: DenseMatrix, targets: Targets, name: impl Into<String>) -> Result<Self> {
        let n = inputs.rows();
        if n == 0 {
            return Err(Error::Config("dataset has no samples".into()));
        }
        if !inputs.is_finite() {
            return Err(Error::Numeric("dataset inputs contain non-finite values".into()));
        }
        match &targets {
            Targets::Values(y) => {
                check_len("target rows", n, y.rows())?;
                if !y.is_finite() {
                    return Err(Error::Numeric("dataset targets contain non-finite values".into()));
                }
            }
            Targets::Classes { labels, n_classes } => {
                check_len("label count", n, labels.len())?;
                if let Some(bad) = labels.iter().find(|&&c| c >= *n_classes) {
                    return Err(Error::Config(format!(
                        "class label {bad} out of range for {n_classes} classes"
                    )));
                }
            }
        }
        Ok(Dataset {
            inputs,
            targets,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn in_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn out_dim(&self) -> usize {
        match &self.targets {
            Targets::Values(y) => y.cols(),
            Targets::Classes { n_classes, .. } => *n_classes,
        }
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize], name: impl Into<String>) -> Result<Dataset> {
        let inputs = DenseMatrix::from_fn(idx.len(), self.in_dim(), |i, j| self.inputs[(idx[i], j)]);
        let targets = match &self.targets {
            Targets::Values(y) => Targets::Values(DenseMatrix::from_fn(idx.len(), y.cols(), |i, j| {
                y[(idx[i], j)]
            })),
            Targets::Classes { labels, n_classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
        };
        Dataset::new(inputs, targets, name)
    }
}

/// Index list into a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch(Vec<usize>);

impl Batch {
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config("batch is empty".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Config(format!("batch index {bad} out of range for N = {n}")));
        }
        Ok(Batch(indices))
    }

    pub fn full(n: usize) -> Self {
        Batch((0..n).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A validated [`ModelSpec`] with its parameter layout.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layout: ParamLayout,
    activation: Activation,
    quadratic: Option<Dataset>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let sizes_ok = |s: &[usize]| s.iter().all(|&n| n >= 1);
        let (layout, quadratic) = match spec.kind {
            ModelKind::Mlp => {
                if spec.layer_sizes.len() < 3 {
                    return Err(Error::Config("an MLP needs at least one hidden layer".into()));
                }
                if !sizes_ok(&spec.layer_sizes) {
                    return Err(Error::Config("layer sizes must be >= 1".into()));
                }
                let layers = spec
                    .layer_sizes
                    .windows(2)
                    .map(|w| LayerShape {
                        n_in: w[0],
                        n_out: w[1],
                        bias: true,
                    })
                    .collect();
                (ParamLayout::new(layers), None)
            }
            ModelKind::LinearRegression => {
                if spec.layer_sizes.len() != 2 || !sizes_ok(&spec.layer_sizes) {
                    return Err(Error::Config(
                        "linear regression takes layer_sizes = [in, out]".into(),
                    ));
                }
                let shape = LayerShape {
                    n_in: spec.layer_sizes[0],
                    n_out: spec.layer_sizes[1],
                    bias: false,
                };
                (ParamLayout::new(vec![shape]), None)
            }
            ModelKind::Quadratic => {
                let q = spec.quadratic_data.as_ref().ok_or_else(|| {
                    Error::Config("the quadratic model requires quadratic_data".into())
                })?;
                let x = DenseMatrix::from_rows(&q.x)?;
                if x.cols() == 0 {
                    return Err(Error::Config("quadratic_data has no columns".into()));
                }
                let y = DenseMatrix::from_row_major(q.y.len(), 1, q.y.clone())?;
                let data = Dataset::new(x, Targets::Values(y), "quadratic")?;
                let shape = LayerShape {
                    n_in: data.in_dim(),
                    n_out: 1,
                    bias: false,
                };
                (ParamLayout::new(vec![shape]), Some(data))
            }
        };
        if spec.kind != ModelKind::Mlp && spec.activation != Activation::Identity {
            return Err(Error::Config(
                "quadratic and linear regression models use the identity activation".into(),
            ));
        }
        if spec.kind == ModelKind::Quadratic && spec.loss != LossKind::Mse {
            return Err(Error::Config("the quadratic model uses the MSE loss".into()));
        }
        Ok(Model {
            activation: spec.activation,
            spec,
            layout,
            quadratic,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn loss_kind(&self) -> LossKind {
        self.spec.loss
    }

    /// The data the model is evaluated on: its own for the quadratic model.
    pub fn data<'a>(&'a self, dataset: &'a Dataset) -> &'a Dataset {
        self.quadratic.as_ref().unwrap_or(dataset)
    }

    fn check(&self, w: &[f64], data: &Dataset) -> Result<()> {
        check_len("parameter count", self.dim(), w.len())?;
        let first = self.layout.layers[0];
        let last = self.layout.layers[self.layout.layers.len() - 1];
        check_len("input dimension", first.n_in, data.in_dim())?;
        check_len("output dimension", last.n_out, data.out_dim())
    }

    /// Draws an initial parameter vector: weights ~ N(0, 1/fan_in), zero biases.
    pub fn init_params(&self, rng: &mut Rng) -> ParamVector {
        let mut w = Vec::with_capacity(self.dim());
        for shape in &self.layout.layers {
            let scale = 1.0 / (shape.n_in as f64).sqrt();
            w.extend((0..shape.n_in * shape.n_out).map(|_| scale * rng.normal()));
            if shape.bias {
                w.extend(std::iter::repeat_n(0.0, shape.n_out));
            }
        }
        ParamVector::new(w)
    }

    /// Network outputs for every row of `inputs`.
    pub fn predict(&self, w: &[f64], inputs: &DenseMatrix) -> Result<DenseMatrix> {
        check_len("parameter count", self.dim(), w.len())?;
        check_len("input dimension", self.layout.layers[0].n_in, inputs.cols())?;
        let out_dim = self.layout.layers.last().map_or(0, |l| l.n_out);
        let mut out = Vec::with_capacity(inputs.rows() * out_dim);
        let mut scratch = network::Scratch::new(&self.layout);
        for i in 0..inputs.rows() {
            network::forward(&self.layout, self.activation, w, inputs.row(i), &mut scratch);
            out.extend_from_slice(scratch.output());
        }
        DenseMatrix::from_row_major(inputs.rows(), out_dim, out)
    }

    /// Smallest |pre-activation| of any hidden unit over `batch`; infinite for
    /// models without hidden layers. Used to keep finite differences off ReLU kinks.
    pub fn min_abs_preactivation(&self, w: &[f64], dataset: &Dataset, batch: &Batch) -> Result<f64> {
        let data = self.data(dataset);
        self.check(w, data)?;
        let hidden = self.layout.layers.len() - 1;
        let mut scratch = network::Scratch::new(&self.layout);
        let mut m = f64::INFINITY;
        for &i in batch.indices() {
            network::forward(&self.layout, self.activation, w, data.inputs.row(i), &mut scratch);
            for l in 0..hidden {
                m = scratch.pre[l].iter().fold(m, |a, z| a.min(z.abs()));
            }
        }
        Ok(m)
    }

    /// Mean loss over `batch`.
    pub fn loss(&self, w: &[f64], dataset: &Dataset, batch: &Batch) -> Result<f64> {
        let data = self.data(dataset);
        self.check(w, data)?;
        let parts = self.reduce_chunks(batch, |chunk| {
            let mut scratch = network::Scratch::new(&self.layout);
            let mut acc = 0.0;
            for &i in chunk {
                acc += network::sample_loss(
                    &self.layout,
                    self.activation,
                    self.spec.loss,
                    w,
                    data,
                    i,
                    &mut scratch,
                    None,
                );
            }
            vec![acc]
        });
        let value = parts[0] / batch.len() as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {value}")));
        }
        Ok(value)
    }

    /// Mean loss and its exact gradient over `batch`.
    pub fn loss_and_grad(&self, w: &[f64], dataset: &Dataset, batch: &Batch) -> Result<(f64, ParamVector)> {
        let data = self.data(dataset);
        self.check(w, data)?;
        let d = self.dim();
        let parts = self.reduce_chunks(batch, |chunk| {
            let mut scratch = network::Scratch::new(&self.layout);
            // slot 0 holds the loss, 1.. the gradient
            let mut acc = vec![0.0; d + 1];
            for &i in chunk {
                acc[0] += network::sample_loss(
                    &self.layout,
                    self.activation,
                    self.spec.loss,
                    w,
                    data,
                    i,
                    &mut scratch,
                    Some(&mut acc[1..]),
                );
            }
            acc
        });
        let inv = 1.0 / batch.len() as f64;
        let loss = parts[0] * inv;
        let grad: Vec<f64> = parts[1..].iter().map(|g| g * inv).collect();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {loss}")));
        }
        check_finite("gradient", &grad)?;
        Ok((loss, ParamVector::new(grad)))
    }

    pub fn grad(&self, w: &[f64], dataset: &Dataset, batch: &Batch) -> Result<ParamVector> {
        Ok(self.loss_and_grad(w, dataset, batch)?.1)
    }

    /// Mean of the per-sample gradients over the whole dataset.
    pub fn full_gradient(&self, w: &[f64], dataset: &Dataset) -> Result<ParamVector> {
        let n = self.data(dataset).len();
        self.grad(w, dataset, &Batch::full(n))
    }

    pub fn full_loss(&self, w: &[f64], dataset: &Dataset) -> Result<f64> {
        let n = self.data(dataset).len();
        self.loss(w, dataset, &Batch::full(n))
    }

    /// Classification accuracy (class targets) on `dataset`.
    pub fn accuracy(&self, w: &[f64], dataset: &Dataset) -> Result<Option<f64>> {
        let Targets::Classes { labels, .. } = &dataset.targets else {
            return Ok(None);
        };
        let out = self.predict(w, &dataset.inputs)?;
        let correct = (0..out.rows())
            .filter(|&i| {
                let row = out.row(i);
                let arg = (0..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                arg == labels[i]
            })
            .count();
        Ok(Some(correct as f64 / out.rows() as f64))
    }

    /// Central finite-difference Hessian of the full-batch loss, built column
    /// by column from the analytic gradient and symmetrized.
    pub fn hessian_fd(&self, w: &[f64], dataset: &Dataset, cap: usize) -> Result<DenseMatrix> {
        let d = self.dim();
        if d > cap {
            return Err(Error::Size { d, cap });
        }
        check_len("parameter count", d, w.len())?;
        let columns: Vec<Vec<f64>> = (0..d)
            .into_par_iter()
            .map(|j| {
                let h = 1e-4 * (1.0 + w[j].abs());
                let mut wp = w.to_vec();
                let mut wm = w.to_vec();
                wp[j] += h;
                wm[j] -= h;
                let gp = self.full_gradient(&wp, dataset)?;
                let gm = self.full_gradient(&wm, dataset)?;
                Ok(gp.iter().zip(gm.iter()).map(|(a, b)| (a - b) / (2.0 * h)).collect())
            })
            .collect::<Result<_>>()?;
        DenseMatrix::from_columns(d, &columns)?.symmetrized()
    }

    /// Chunked evaluation with a fixed pairwise reduction tree, so the result
    /// does not depend on how chunks are scheduled.
    fn reduce_chunks<F>(&self, batch: &Batch, f: F) -> Vec<f64>
    where
        F: Fn(&[usize]) -> Vec<f64> + Sync,
    {
        let mut parts: Vec<Vec<f64>> = batch.indices().par_chunks(CHUNK).map(&f).collect();
        while parts.len() > 1 {
            let mut next = Vec::with_capacity(parts.len().div_ceil(2));
            let mut it = parts.into_iter();
            while let Some(mut a) = it.next() {
                if let Some(b) = it.next() {
                    for (x, y) in a.iter_mut().zip(&b) {
                        *x += y;
                    }
                }
                next.push(a);
            }
            parts = next;
        }
        parts.pop().unwrap_or_default()
    }
}

/// Samples of the full-batch gradient flow `w' = -grad l(w)`.
#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<ParamVector>,
}

impl FlowTrajectory {
    pub fn last(&self) -> &ParamVector {
        self.states.last().expect("trajectory always holds the initial state")
    }
}

/// Classic fourth-order Runge-Kutta integration of the gradient flow from
/// `w0` to `t_end`, recording every step. The final step is shortened to land
/// on `t_end` exactly.
pub fn gradient_flow(
    model: &Model,
    w0: &[f64],
    dataset: &Dataset,
    t_end: f64,
    dt: f64,
) -> Result<FlowTrajectory> {
    if !(dt > 0.0) || !(t_end >= 0.0) || !t_end.is_finite() {
        return Err(Error::Config(format!(
            "gradient flow needs dt > 0 and t_end >= 0, got dt = {dt}, t_end = {t_end}"
        )));
    }
    let steps = ((t_end / dt) - 1e-9).ceil().max(0.0) as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut w = ParamVector::from(w0);
    times.push(0.0);
    states.push(w.clone());
    let rhs = |x: &[f64]| -> Result<Vec<f64>> {
        Ok(model.full_gradient(x, dataset)?.iter().map(|g| -g).collect())
    };
    let shifted = |base: &[f64], k: &[f64], h: f64| -> Vec<f64> {
        base.iter().zip(k).map(|(b, ki)| b + h * ki).collect()
    };
    for step in 0..steps {
        let t = step as f64 * dt;
        let h = if step + 1 == steps { t_end - t } else { dt };
        let stage = |r: Result<Vec<f64>>| r.map_err(|e| divergence(step, e));
        let k1 = stage(rhs(&w))?;
        let k2 = stage(rhs(&shifted(&w, &k1, 0.5 * h)))?;
        let k3 = stage(rhs(&shifted(&w, &k2, 0.5 * h)))?;
        let k4 = stage(rhs(&shifted(&w, &k3, h)))?;
        for j in 0..w.len() {
            w[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: "non-finite state in gradient flow".into(),
            });
        }
        times.push(if step + 1 == steps { t_end } else { (step + 1) as f64 * dt });
        states.push(w.clone());
    }
    Ok(FlowTrajectory { times, states })
}

fn divergence(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(detail) => Error::Divergence { step, detail },
        other => other,
    }
}

#[cfg(test)]
mod tests;
