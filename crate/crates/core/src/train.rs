//! Minibatch training loop shared by every optimizer.

use serde::{Deserialize, Serialize};

use crate::analysis::{LogEntry, TrajectoryLog};
use crate::error::{check_len, Error, Result};
use crate::grouping::{group_norms, sparsity, GroupPartition};
use crate::linalg::Rng;
use crate::model::{Batch, Dataset, Model};
use crate::optim::{l1_dp_step, rda_step, AltSdpState, Checkpoint, LrSchedule, SgdState};
use crate::param::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[serde(rename = "altsdp")]
    AltSdp,
    Rda,
    #[serde(rename = "l1dp")]
    L1Dp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub c: f64,
    pub mu: f64,
    pub rda_lambda: f64,
    pub sparsity_floor: Option<f64>,
    /// Log every this many steps; 0 logs once per epoch.
    pub log_every: usize,
    /// Keep a parameter snapshot every this many steps.
    pub snapshot_every: Option<usize>,
}

impl TrainConfig {
    pub fn sgd(epochs: usize, batch_size: usize, gamma: f64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            epochs,
            batch_size,
            schedule: LrSchedule::constant(gamma),
            momentum: 0.0,
            c: 0.0,
            mu: 0.0,
            rda_lambda: 0.0,
            sparsity_floor: None,
            log_every: 0,
            snapshot_every: None,
        }
    }

    pub fn altsdp(epochs: usize, batch_size: usize, gamma: f64, c: f64, mu: f64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::AltSdp,
            c,
            mu,
            ..Self::sgd(epochs, batch_size, gamma)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub w: ParamVector,
    pub log: TrajectoryLog,
    pub checkpoint: Checkpoint,
    pub steps: u64,
    pub final_loss: f64,
    pub final_sparsity: f64,
    pub final_accuracy: Option<f64>,
}

enum Opt {
    Sgd(SgdState),
    Dual(AltSdpState, OptimizerKind),
}

impl Opt {
    fn w(&self) -> &ParamVector {
        match self {
            Opt::Sgd(s) => &s.w,
            Opt::Dual(s, _) => &s.w,
        }
    }

    fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        match self {
            Opt::Sgd(s) => s.set_gamma(gamma),
            Opt::Dual(s, _) => s.set_gamma(gamma),
        }
    }

    fn step(&mut self, grad: &[f64]) -> Result<()> {
        match self {
            Opt::Sgd(s) => s.step(grad),
            Opt::Dual(s, OptimizerKind::Rda) => rda_step(s, grad),
            Opt::Dual(s, OptimizerKind::L1Dp) => l1_dp_step(s, grad),
            Opt::Dual(s, _) => s.step(grad),
        }
    }

    fn checkpoint(&self, partition: &GroupPartition) -> Checkpoint {
        match self {
            Opt::Sgd(s) => s.checkpoint(partition.clone()),
            Opt::Dual(s, _) => s.checkpoint(),
        }
    }
}

fn build(cfg: &TrainConfig, partition: &GroupPartition, w0: ParamVector) -> Result<Opt> {
    let gamma = cfg.schedule.gamma(0);
    let d = w0.len();
    Ok(match cfg.optimizer {
        OptimizerKind::Sgd => Opt::Sgd(SgdState::new(w0, gamma, cfg.momentum)?),
        OptimizerKind::AltSdp => Opt::Dual(
            AltSdpState::new(w0, partition.clone(), gamma, cfg.c, cfg.mu)?
                .with_momentum(cfg.momentum)?
                .with_sparsity_floor(cfg.sparsity_floor)?,
            cfg.optimizer,
        ),
        OptimizerKind::Rda => Opt::Dual(
            AltSdpState::rda(d, partition.clone(), gamma, cfg.rda_lambda)?.with_momentum(cfg.momentum)?,
            cfg.optimizer,
        ),
        OptimizerKind::L1Dp => Opt::Dual(
            AltSdpState::new(w0, GroupPartition::singletons(d)?, gamma, cfg.c, cfg.mu)?
                .with_momentum(cfg.momentum)?
                .with_sparsity_floor(cfg.sparsity_floor)?,
            cfg.optimizer,
        ),
    })
}

/// Trains from `w0` with shuffled minibatches. Epoch `e` is shuffled with a
/// generator derived from `shuffle_seed` and `e`, so the batch sequence does
/// not depend on anything else in the run.
pub fn train(
    model: &Model,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    partition: &GroupPartition,
    w0: ParamVector,
    cfg: &TrainConfig,
    shuffle_seed: u64,
) -> Result<TrainOutcome> {
    check_len("initial point", model.dim(), w0.len())?;
    check_len("partition", model.dim(), partition.dim())?;
    cfg.schedule.validate()?;
    let n = model.data(train_set).len();
    if cfg.batch_size == 0 || cfg.batch_size > n {
        return Err(Error::Config(format!(
            "batch_size must lie in [1, {n}], got {}",
            cfg.batch_size
        )));
    }
    if cfg.snapshot_every == Some(0) {
        return Err(Error::Config("snapshot_every must be positive".into()));
    }
    let mut opt = build(cfg, partition, w0)?;
    let mut log = TrajectoryLog::default();
    let mut step: u64 = 0;
    let mut t = 0.0;
    let record = |log: &mut TrajectoryLog, w: &ParamVector, step: u64, t: f64| -> Result<()> {
        let snap = cfg.snapshot_every.is_some_and(|k| step.is_multiple_of(k as u64));
        log.push(LogEntry {
            n: step,
            t,
            train_loss: model.full_loss(w, train_set)?,
            test_accuracy: match test_set {
                Some(ts) => model.accuracy(w, ts)?,
                None => None,
            },
            sparsity: sparsity(w, partition)?,
            group_norms: snap.then(|| group_norms(w, partition)).transpose()?,
            w: snap.then(|| w.clone()),
        })
    };
    record(&mut log, opt.w(), 0, 0.0)?;
    for epoch in 0..cfg.epochs {
        let gamma = cfg.schedule.gamma(epoch as u64);
        opt.set_gamma(gamma)?;
        let mut rng = Rng::new(Rng::derive_seed(shuffle_seed, &format!("epoch-{epoch}")));
        let order = rng.permutation(n);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::new(chunk.to_vec(), n)?;
            let (loss, grad) = model
                .loss_and_grad(opt.w(), train_set, &batch)
                .map_err(|e| diverged(step, e))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: step as usize,
                    detail: format!("minibatch loss is {loss}"),
                });
            }
            opt.step(&grad).map_err(|e| diverged(step, e))?;
            step += 1;
            t += gamma;
            if cfg.log_every > 0 && step.is_multiple_of(cfg.log_every as u64) {
                record(&mut log, opt.w(), step, t).map_err(|e| diverged(step, e))?;
            }
        }
        if cfg.log_every == 0 && log.last().is_none_or(|e| e.n != step) {
            record(&mut log, opt.w(), step, t).map_err(|e| diverged(step, e))?;
        }
    }
    if log.last().is_none_or(|e| e.n != step) {
        record(&mut log, opt.w(), step, t).map_err(|e| diverged(step, e))?;
    }
    let last = log.last().expect("log holds the initial entry");
    let (final_loss, final_sparsity, final_accuracy) = (last.train_loss, last.sparsity, last.test_accuracy);
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            step: step as usize,
            detail: format!("final training loss is {final_loss}"),
        });
    }
    Ok(TrainOutcome {
        w: opt.w().clone(),
        checkpoint: opt.checkpoint(partition),
        log,
        steps: step,
        final_loss,
        final_sparsity,
        final_accuracy,
    })
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::Numeric(detail) => Error::Divergence { step: step as usize, detail },
        other => other,
    }
}
