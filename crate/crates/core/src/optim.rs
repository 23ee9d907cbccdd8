//! Optimizers: AltSDP (with its RDA and per-parameter special cases), SGD
//! with optional heavy-ball momentum, and step learning-rate schedules.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::grouping::{group_norms, sparsity, GroupPartition};
use crate::param::ParamVector;

/// `g(n, gamma) = c * sqrt(gamma) * (n * gamma)^mu`.
pub fn tuning(n: u64, gamma: f64, c: f64, mu: f64) -> Result<f64> {
    validate_hyper(gamma, c, mu)?;
    if n == 0 {
        return Ok(0.0);
    }
    Ok(c * gamma.sqrt() * (n as f64 * gamma).powf(mu))
}

/// `c = 0` switches thresholding off, in which case `mu` is irrelevant.
pub fn validate_hyper(gamma: f64, c: f64, mu: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("learning rate must be > 0, got {gamma}")));
    }
    if !(c >= 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("tuning scale c must be >= 0, got {c}")));
    }
    if !(mu.is_finite() && (mu > 0.0 || (c == 0.0 && mu >= 0.0))) {
        return Err(Error::Config(format!("tuning exponent mu must be > 0, got {mu}")));
    }
    Ok(())
}

fn validate_momentum(m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Config(format!("momentum must lie in [0, 1), got {m}")));
    }
    Ok(())
}

/// Group soft-threshold: `w_i = (1 - g / |v_i|)_+ v_i`, zero groups stay zero.
pub fn group_soft_threshold(v: &[f64], partition: &GroupPartition, g: f64) -> Result<Vec<f64>> {
    let norms = group_norms(v, partition)?;
    let mut w = vec![0.0; v.len()];
    for (group, nv) in partition.groups().iter().zip(norms) {
        if nv == 0.0 || nv <= g {
            continue;
        }
        let factor = 1.0 - g / nv;
        for &j in group {
            w[j] = factor * v[j];
        }
    }
    Ok(w)
}

/// How the AltSDP threshold is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdRule {
    /// The tuning function `g(n, gamma)`.
    Tuning,
    /// Group-lasso RDA: `n * gamma * lambda`.
    Rda { lambda: f64 },
}

impl ThresholdRule {
    pub fn value(&self, n: u64, gamma: f64, c: f64, mu: f64) -> Result<f64> {
        match *self {
            ThresholdRule::Tuning => tuning(n, gamma, c, mu),
            ThresholdRule::Rda { lambda } => Ok(rda_threshold(n, gamma, lambda)),
        }
    }
}

fn rda_threshold(n: u64, gamma: f64, lambda: f64) -> f64 {
    n as f64 * gamma * lambda
}

#[derive(Debug, Clone, PartialEq)]
pub struct AltSdpState {
    /// Dual accumulator.
    pub v: ParamVector,
    /// Primal iterate.
    pub w: ParamVector,
    pub n: u64,
    /// Current (scheduled) learning rate.
    pub gamma: f64,
    pub c: f64,
    pub mu: f64,
    pub partition: GroupPartition,
    pub momentum: f64,
    pub momentum_buffer: Option<ParamVector>,
    pub rule: ThresholdRule,
    /// Minimum nonzero-parameter ratio; once thresholding would go below it the
    /// threshold stops growing.
    pub sparsity_floor: Option<f64>,
    /// Threshold applied by the most recent step.
    pub last_threshold: f64,
    frozen: Option<f64>,
}

impl AltSdpState {
    /// Starts from `v0 = w0`.
    pub fn new(w0: ParamVector, partition: GroupPartition, gamma: f64, c: f64, mu: f64) -> Result<Self> {
        check_len("AltSDP initial point", partition.dim(), w0.len())?;
        check_finite("AltSDP initial point", &w0)?;
        validate_hyper(gamma, c, mu)?;
        Ok(AltSdpState {
            v: w0.clone(),
            w: w0,
            n: 0,
            gamma,
            c,
            mu,
            partition,
            momentum: 0.0,
            momentum_buffer: None,
            rule: ThresholdRule::Tuning,
            sparsity_floor: None,
            last_threshold: 0.0,
            frozen: None,
        })
    }

    /// Group-lasso RDA with `w0 = 0`.
    pub fn rda(d: usize, partition: GroupPartition, gamma: f64, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("RDA lambda must be >= 0, got {lambda}")));
        }
        let mut s = Self::new(ParamVector::zeros(d), partition, gamma, 0.0, 0.0)?;
        s.rule = ThresholdRule::Rda { lambda };
        Ok(s)
    }

    pub fn with_momentum(mut self, momentum: f64) -> Result<Self> {
        validate_momentum(momentum)?;
        self.momentum = momentum;
        Ok(self)
    }

    pub fn with_sparsity_floor(mut self, floor: Option<f64>) -> Result<Self> {
        if let Some(f) = floor {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("sparsity floor must lie in [0, 1], got {f}")));
            }
        }
        self.sparsity_floor = floor;
        Ok(self)
    }

    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        validate_hyper(gamma, self.c, self.mu)?;
        self.gamma = gamma;
        Ok(())
    }

    /// Whether the sparsity floor has stopped threshold growth.
    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    /// One AltSDP step with this state's threshold rule.
    pub fn step(&mut self, grad: &[f64]) -> Result<()> {
        let rule = self.rule;
        let (c, mu) = (self.c, self.mu);
        self.step_with(grad, |n, gamma| rule.value(n, gamma, c, mu))
    }

    /// One AltSDP step with an arbitrary threshold function of `(n, gamma)`.
    pub fn step_with(&mut self, grad: &[f64], threshold: impl Fn(u64, f64) -> Result<f64>) -> Result<()> {
        check_len("gradient", self.v.len(), grad.len())?;
        check_finite("gradient", grad)?;
        let gamma = self.gamma;
        if self.momentum > 0.0 {
            let buf = self
                .momentum_buffer
                .get_or_insert_with(|| ParamVector::zeros(grad.len()));
            for (b, g) in buf.iter_mut().zip(grad) {
                *b = self.momentum * *b + g;
            }
            for (v, b) in self.v.iter_mut().zip(buf.iter()) {
                *v -= gamma * b;
            }
        } else {
            for (v, g) in self.v.iter_mut().zip(grad) {
                *v -= gamma * g;
            }
        }
        let mut g = match self.frozen {
            Some(f) => f,
            None => threshold(self.n, gamma)?,
        };
        let mut w = group_soft_threshold(&self.v, &self.partition, g)?;
        if let (Some(floor), None) = (self.sparsity_floor, self.frozen) {
            if 1.0 - sparsity(&w, &self.partition)? < floor {
                g = self.last_threshold;
                self.frozen = Some(g);
                w = group_soft_threshold(&self.v, &self.partition, g)?;
            }
        }
        self.w = ParamVector::new(w);
        self.last_threshold = g;
        self.n += 1;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            n: self.n,
            gamma: self.gamma,
            c: self.c,
            mu: self.mu,
            v: self.v.clone(),
            w: self.w.clone(),
            partition: self.partition.clone(),
            momentum: self.momentum,
            buffer: self.momentum_buffer.clone(),
            rda_lambda: match self.rule {
                ThresholdRule::Rda { lambda } => Some(lambda),
                ThresholdRule::Tuning => None,
            },
            config_hash: None,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let d = ck.partition.dim();
        check_len("checkpoint v", d, ck.v.len())?;
        check_len("checkpoint w", d, ck.w.len())?;
        if let Some(b) = &ck.buffer {
            check_len("checkpoint buffer", d, b.len())?;
        }
        validate_hyper(ck.gamma, ck.c, ck.mu)?;
        validate_momentum(ck.momentum)?;
        let rule = match ck.rda_lambda {
            Some(lambda) => ThresholdRule::Rda { lambda },
            None => ThresholdRule::Tuning,
        };
        let last_threshold = match ck.n {
            0 => 0.0,
            n => rule.value(n - 1, ck.gamma, ck.c, ck.mu)?,
        };
        Ok(AltSdpState {
            v: ck.v,
            w: ck.w,
            n: ck.n,
            gamma: ck.gamma,
            c: ck.c,
            mu: ck.mu,
            partition: ck.partition,
            momentum: ck.momentum,
            momentum_buffer: ck.buffer,
            rule,
            sparsity_floor: None,
            last_threshold,
            frozen: None,
        })
    }
}

/// Group-lasso RDA step: dual averaging with threshold `n * gamma * lambda`.
pub fn rda_step(state: &mut AltSdpState, grad: &[f64]) -> Result<()> {
    let ThresholdRule::Rda { lambda } = state.rule else {
        return Err(Error::Config("rda_step needs a state built with AltSdpState::rda".into()));
    };
    check_len("gradient", state.v.len(), grad.len())?;
    check_finite("gradient", grad)?;
    for (v, g) in state.v.iter_mut().zip(grad) {
        *v -= state.gamma * g;
    }
    let threshold = rda_threshold(state.n, state.gamma, lambda);
    let norms = group_norms(&state.v, &state.partition)?;
    for (group, nv) in state.partition.groups().iter().zip(norms) {
        let keep = nv != 0.0 && nv > threshold;
        let factor = 1.0 - threshold / nv;
        for &j in group {
            state.w[j] = if keep { factor * state.v[j] } else { 0.0 };
        }
    }
    state.last_threshold = threshold;
    state.n += 1;
    Ok(())
}

/// The coordinate-wise directional pruning baseline: AltSDP on singletons.
pub fn l1_dp_step(state: &mut AltSdpState, grad: &[f64]) -> Result<()> {
    if !state.partition.is_singleton() {
        return Err(Error::Partition(
            "the l1 baseline requires the per-parameter partition".into(),
        ));
    }
    state.step(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub w: ParamVector,
    pub n: u64,
    pub gamma: f64,
    pub momentum: f64,
    pub momentum_buffer: Option<ParamVector>,
}

impl SgdState {
    pub fn new(w0: ParamVector, gamma: f64, momentum: f64) -> Result<Self> {
        check_finite("SGD initial point", &w0)?;
        validate_hyper(gamma, 0.0, 0.0)?;
        validate_momentum(momentum)?;
        Ok(SgdState {
            w: w0,
            n: 0,
            gamma,
            momentum,
            momentum_buffer: None,
        })
    }

    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        validate_hyper(gamma, 0.0, 0.0)?;
        self.gamma = gamma;
        Ok(())
    }

    /// Heavy-ball step: `buf = m buf + grad; w -= gamma buf`.
    pub fn step(&mut self, grad: &[f64]) -> Result<()> {
        check_len("gradient", self.w.len(), grad.len())?;
        check_finite("gradient", grad)?;
        if self.momentum > 0.0 {
            let buf = self
                .momentum_buffer
                .get_or_insert_with(|| ParamVector::zeros(grad.len()));
            for (b, g) in buf.iter_mut().zip(grad) {
                *b = self.momentum * *b + g;
            }
            for (w, b) in self.w.iter_mut().zip(buf.iter()) {
                *w -= self.gamma * b;
            }
        } else {
            for (w, g) in self.w.iter_mut().zip(grad) {
                *w -= self.gamma * g;
            }
        }
        self.n += 1;
        Ok(())
    }

    /// SGD has no dual variable or threshold: `v = w`, `c = mu = 0`.
    pub fn checkpoint(&self, partition: GroupPartition) -> Checkpoint {
        Checkpoint {
            n: self.n,
            gamma: self.gamma,
            c: 0.0,
            mu: 0.0,
            v: self.w.clone(),
            w: self.w.clone(),
            partition,
            momentum: self.momentum,
            buffer: self.momentum_buffer.clone(),
            rda_lambda: None,
            config_hash: None,
        }
    }
}

/// On-disk optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub n: u64,
    pub gamma: f64,
    pub c: f64,
    pub mu: f64,
    pub v: ParamVector,
    pub w: ParamVector,
    pub partition: GroupPartition,
    pub momentum: f64,
    pub buffer: Option<ParamVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rda_lambda: Option<f64>,
    /// Provenance of the run that wrote the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Milestone {
    pub epoch: u64,
    pub multiplier: f64,
}

/// Step decay: `base` times every multiplier whose milestone has been reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    #[serde(default)]
    pub milestones: Vec<Milestone>,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule {
            base,
            milestones: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(Error::Config(format!("base learning rate must be > 0, got {}", self.base)));
        }
        for pair in self.milestones.windows(2) {
            if pair[1].epoch <= pair[0].epoch {
                return Err(Error::Config("milestones must be strictly increasing".into()));
            }
        }
        if let Some(m) = self.milestones.iter().find(|m| !(m.multiplier > 0.0 && m.multiplier.is_finite())) {
            return Err(Error::Config(format!("milestone multiplier must be > 0, got {}", m.multiplier)));
        }
        Ok(())
    }

    pub fn gamma(&self, epoch: u64) -> f64 {
        schedule_gamma(self, epoch)
    }
}

pub fn schedule_gamma(sched: &LrSchedule, epoch: u64) -> f64 {
    sched
        .milestones
        .iter()
        .filter(|m| m.epoch <= epoch)
        .fold(sched.base, |g, m| g * m.multiplier)
}
