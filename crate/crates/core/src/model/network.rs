use super::{Activation, Dataset, LossKind, Targets};
use crate::grouping::ParamLayout;

/// Per-thread forward/backward buffers.
pub(super) struct Scratch {
    /// Pre-activations per layer.
    pub(super) pre: Vec<Vec<f64>>,
    /// Layer inputs: `acts[0]` is the sample, `acts[l]` feeds layer `l`.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Scratch {
    pub(super) fn new(layout: &ParamLayout) -> Self {
        let pre = layout.layers.iter().map(|l| vec![0.0; l.n_out]).collect();
        let mut acts: Vec<Vec<f64>> = layout.layers.iter().map(|l| vec![0.0; l.n_in]).collect();
        acts.push(vec![0.0; layout.layers.last().map_or(0, |l| l.n_out)]);
        Scratch {
            pre,
            acts,
            delta: Vec::new(),
            delta_prev: Vec::new(),
        }
    }

    pub(super) fn output(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }
}

pub(super) fn forward(layout: &ParamLayout, act: Activation, w: &[f64], x: &[f64], s: &mut Scratch) {
    s.acts[0].copy_from_slice(x);
    let n_layers = layout.layers.len();
    let mut offset = 0;
    for (l, shape) in layout.layers.iter().enumerate() {
        let weights = &w[offset..offset + shape.n_in * shape.n_out];
        let bias_start = offset + shape.n_in * shape.n_out;
        let (input, rest) = s.acts.split_at_mut(l + 1);
        let input = &input[l];
        let out = &mut rest[0];
        for u in 0..shape.n_out {
            let row = &weights[u * shape.n_in..(u + 1) * shape.n_in];
            let mut z: f64 = row.iter().zip(input.iter()).map(|(a, b)| a * b).sum();
            if shape.bias {
                z += w[bias_start + u];
            }
            s.pre[l][u] = z;
            out[u] = if l + 1 < n_layers { act.apply(z) } else { z };
        }
        offset += shape.len();
    }
}

/// Loss of sample `i`; when `grad` is given the sample's gradient is added to it.
#[allow(clippy::too_many_arguments)]
pub(super) fn sample_loss(
    layout: &ParamLayout,
    act: Activation,
    loss: LossKind,
    w: &[f64],
    data: &Dataset,
    i: usize,
    s: &mut Scratch,
    grad: Option<&mut [f64]>,
) -> f64 {
    forward(layout, act, w, data.inputs.row(i), s);
    let out = s.acts.last().expect("at least one layer");
    s.delta.clear();
    let value = match (&data.targets, loss) {
        (Targets::Values(y), LossKind::Mse) => {
            let target = y.row(i);
            let mut acc = 0.0;
            for (o, t) in out.iter().zip(target) {
                let r = o - t;
                acc += r * r;
                s.delta.push(r);
            }
            0.5 * acc
        }
        (Targets::Classes { labels, .. }, LossKind::Mse) => {
            // one-hot regression targets
            let mut acc = 0.0;
            for (k, o) in out.iter().enumerate() {
                let r = o - if k == labels[i] { 1.0 } else { 0.0 };
                acc += r * r;
                s.delta.push(r);
            }
            0.5 * acc
        }
        (Targets::Classes { labels, .. }, LossKind::SoftmaxCrossEntropy) => {
            let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = out.iter().map(|o| (o - m).exp()).sum();
            let lse = m + sum.ln();
            for (k, o) in out.iter().enumerate() {
                let p = (o - lse).exp();
                s.delta.push(if k == labels[i] { p - 1.0 } else { p });
            }
            lse - out[labels[i]]
        }
        (Targets::Values(_), LossKind::SoftmaxCrossEntropy) => {
            return f64::NAN;
        }
    };
    if let Some(grad) = grad {
        backward(layout, act, w, s, grad);
    }
    value
}

fn backward(layout: &ParamLayout, act: Activation, w: &[f64], s: &mut Scratch, grad: &mut [f64]) {
    let offsets = layout.offsets();
    for l in (0..layout.layers.len()).rev() {
        let shape = layout.layers[l];
        let offset = offsets[l];
        let input = &s.acts[l];
        for u in 0..shape.n_out {
            let d = s.delta[u];
            if d == 0.0 {
                continue;
            }
            let row = &mut grad[offset + u * shape.n_in..offset + (u + 1) * shape.n_in];
            for (g, a) in row.iter_mut().zip(input) {
                *g += d * a;
            }
            if shape.bias {
                grad[offset + shape.n_in * shape.n_out + u] += d;
            }
        }
        if l == 0 {
            break;
        }
        s.delta_prev.clear();
        s.delta_prev.resize(shape.n_in, 0.0);
        let weights = &w[offset..offset + shape.n_in * shape.n_out];
        for u in 0..shape.n_out {
            let d = s.delta[u];
            if d == 0.0 {
                continue;
            }
            for (k, wk) in weights[u * shape.n_in..(u + 1) * shape.n_in].iter().enumerate() {
                s.delta_prev[k] += d * wk;
            }
        }
        for (k, dp) in s.delta_prev.iter_mut().enumerate() {
            *dp *= act.derivative(s.pre[l - 1][k]);
        }
        std::mem::swap(&mut s.delta, &mut s.delta_prev);
    }
}
