//! Structured partitions of a flat parameter vector and the group-wise
//! operators built on them: slicing, norms, normalization and sparsity.
//!
//! Parameters are flattened layer by layer; each layer stores its weight
//! matrix row-major (one row per output unit) followed by its bias.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::norm;

/// Shape of one dense layer inside a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub n_in: usize,
    pub n_out: usize,
    pub bias: bool,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.n_in * self.n_out + if self.bias { self.n_out } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub layers: Vec<LayerShape>,
}

impl ParamLayout {
    pub fn new(layers: Vec<LayerShape>) -> Self {
        ParamLayout { layers }
    }

    pub fn dim(&self) -> usize {
        self.layers.iter().map(LayerShape::len).sum()
    }

    /// Start offset of each layer.
    pub fn offsets(&self) -> Vec<usize> {
        self.layers
            .iter()
            .scan(0, |acc, l| {
                let start = *acc;
                *acc += l.len();
                Some(start)
            })
            .collect()
    }

    /// Indices of the incoming weights of `unit` in layer `layer`, plus its bias.
    pub fn unit_indices(&self, layer: usize, unit: usize) -> Vec<usize> {
        let shape = self.layers[layer];
        let start = self.offsets()[layer];
        let mut idx: Vec<usize> = (0..shape.n_in)
            .map(|k| start + unit * shape.n_in + k)
            .collect();
        if shape.bias {
            idx.push(start + shape.n_in * shape.n_out + unit);
        }
        idx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GroupingStrategy {
    PerParameter,
    PerOutputUnit,
    PerLayer,
    Explicit { groups: Vec<Vec<usize>> },
}

/// Disjoint cover of `0..d` by nonempty index groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPartition", into = "RawPartition")]
pub struct GroupPartition {
    d: usize,
    groups: Vec<Vec<usize>>,
    owner: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPartition {
    d: usize,
    groups: Vec<Vec<usize>>,
}

impl TryFrom<RawPartition> for GroupPartition {
    type Error = Error;

    fn try_from(raw: RawPartition) -> Result<Self> {
        GroupPartition::new(raw.d, raw.groups)
    }
}

impl From<GroupPartition> for RawPartition {
    fn from(p: GroupPartition) -> Self {
        RawPartition {
            d: p.d,
            groups: p.groups,
        }
    }
}

impl GroupPartition {
    pub fn new(d: usize, groups: Vec<Vec<usize>>) -> Result<Self> {
        if d == 0 {
            return Err(Error::Partition("parameter count must be >= 1".into()));
        }
        let mut owner = vec![usize::MAX; d];
        for (gi, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::Partition(format!("group {gi} is empty")));
            }
            for &j in group {
                if j >= d {
                    return Err(Error::Partition(format!(
                        "index {j} in group {gi} is out of range for d = {d}"
                    )));
                }
                if owner[j] != usize::MAX {
                    return Err(Error::Partition(format!(
                        "index {j} appears in groups {} and {gi}",
                        owner[j]
                    )));
                }
                owner[j] = gi;
            }
        }
        if let Some(j) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::Partition(format!("index {j} is not covered")));
        }
        Ok(GroupPartition { d, groups, owner })
    }

    /// `{{0}, {1}, ..., {d-1}}`
    pub fn singletons(d: usize) -> Result<Self> {
        Self::new(d, (0..d).map(|j| vec![j]).collect())
    }

    /// Contiguous groups with the given sizes.
    pub fn contiguous(sizes: &[usize]) -> Result<Self> {
        let mut groups = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            groups.push((start..start + s).collect());
            start += s;
        }
        Self::new(start, groups)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group(&self, i: usize) -> &[usize] {
        &self.groups[i]
    }

    /// Group that owns parameter `j`.
    pub fn owner(&self, j: usize) -> usize {
        self.owner[j]
    }

    pub fn is_singleton(&self) -> bool {
        self.groups.iter().all(|g| g.len() == 1)
    }

    /// Scatters per-group sub-vectors back into a flat vector.
    pub fn assemble(&self, slices: &[Vec<f64>]) -> Result<Vec<f64>> {
        check_len("group count", self.len(), slices.len())?;
        let mut out = vec![0.0; self.d];
        for (group, slice) in self.groups.iter().zip(slices) {
            check_len("group slice", group.len(), slice.len())?;
            for (&j, &x) in group.iter().zip(slice) {
                out[j] = x;
            }
        }
        Ok(out)
    }
}

pub fn make_partition(layout: &ParamLayout, strategy: &GroupingStrategy) -> Result<GroupPartition> {
    let d = layout.dim();
    if d == 0 {
        return Err(Error::Partition("layout has no parameters".into()));
    }
    match strategy {
        GroupingStrategy::PerParameter => GroupPartition::singletons(d),
        GroupingStrategy::PerOutputUnit => {
            let mut groups = Vec::new();
            for (l, shape) in layout.layers.iter().enumerate() {
                for unit in 0..shape.n_out {
                    groups.push(layout.unit_indices(l, unit));
                }
            }
            GroupPartition::new(d, groups)
        }
        GroupingStrategy::PerLayer => {
            let sizes: Vec<usize> = layout.layers.iter().map(LayerShape::len).collect();
            GroupPartition::contiguous(&sizes)
        }
        GroupingStrategy::Explicit { groups } => GroupPartition::new(d, groups.clone()),
    }
}

fn check_dim(w: &[f64], g: &GroupPartition) -> Result<()> {
    check_len("parameter vector vs partition", g.dim(), w.len())
}

pub fn group_slices(w: &[f64], g: &GroupPartition) -> Result<Vec<Vec<f64>>> {
    check_dim(w, g)?;
    Ok(g.groups()
        .iter()
        .map(|group| group.iter().map(|&j| w[j]).collect())
        .collect())
}

pub fn group_norms(w: &[f64], g: &GroupPartition) -> Result<Vec<f64>> {
    check_dim(w, g)?;
    Ok(g.groups()
        .iter()
        .map(|group| group.iter().map(|&j| w[j] * w[j]).sum::<f64>().sqrt())
        .collect())
}

/// Per-group unit normalization. Zero groups map to zero sub-vectors.
pub fn normalize_groups(w: &[f64], g: &GroupPartition) -> Result<Vec<f64>> {
    let norms = group_norms(w, g)?;
    let mut out = vec![0.0; w.len()];
    for (group, &n) in g.groups().iter().zip(&norms) {
        if n > 0.0 {
            for &j in group {
                out[j] = w[j] / n;
            }
        }
    }
    Ok(out)
}

/// Fraction of parameters that belong to groups whose entries are all exactly zero.
pub fn sparsity(w: &[f64], g: &GroupPartition) -> Result<f64> {
    check_dim(w, g)?;
    let zeroed: usize = g
        .groups()
        .iter()
        .filter(|group| group.iter().all(|&j| w[j] == 0.0))
        .map(Vec::len)
        .sum();
    Ok(zeroed as f64 / g.dim() as f64)
}

/// Indices of groups whose entries are all exactly zero.
pub fn zero_groups(w: &[f64], g: &GroupPartition) -> Result<Vec<usize>> {
    check_dim(w, g)?;
    Ok(g.groups()
        .iter()
        .enumerate()
        .filter(|(_, group)| group.iter().all(|&j| w[j] == 0.0))
        .map(|(i, _)| i)
        .collect())
}

/// `E(x) = x / |x|`, zero stays zero.
pub fn unit(x: &[f64]) -> Vec<f64> {
    let n = norm(x);
    if n > 0.0 {
        x.iter().map(|v| v / n).collect()
    } else {
        vec![0.0; x.len()]
    }
}
