//! Structured directional pruning.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod grouping;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod prox;
pub mod sdp_oracle;
pub mod table;
pub mod train;
pub mod param;

pub use error::{Error, Result};
pub use grouping::{GroupPartition, GroupingStrategy};
pub use linalg::DenseMatrix;
pub use model::{Batch, Dataset, Model, ModelSpec};
pub use optim::{AltSdpState, Checkpoint, LrSchedule, SgdState};
pub use param::ParamVector;
pub use train::{train, OptimizerKind, TrainConfig, TrainOutcome};
