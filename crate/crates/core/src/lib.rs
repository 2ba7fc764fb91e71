//! Adaptive-margin triplet loss-less center loss with three negative-sample
//! selection strategies, a small trainable classifier with exact gradients,
//! and the training/evaluation harness around them.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod centers;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod nss;
pub mod numeric;
pub mod objective;
pub mod trainer;

pub use attention::{AttentionMode, AttentionOutput, AttentionParams};
pub use centers::ClassCenters;
pub use data::{DataConfig, Dataset};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossGrads};
pub use model::{Activation, Batch, ForwardTrace, ModelConfig, ModelParams};
pub use nss::{ConfusionStats, NegativeAssignment, NssMode};
pub use numeric::{Rng, Tensor3};
pub use objective::{MarginMode, Network, Objective};
pub use trainer::{MetricsReport, TrainConfig, TrainState};
