//! Probabilistic uncertainty modeling for relationship classification.
//!
//! The crate bundles a small reverse-mode autodiff engine, the network
//! blocks of a residual cross-attention graph model, a diagonal-Gaussian
//! relation head with reparameterized sampling, the uncertainty-aware
//! training loss, a synthetic long-tailed benchmark with planted label
//! ambiguity, and the recall metrics used to evaluate it.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod pum;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{finite_difference_check, FdCheck, FdOutcome, NodeId, Op, OpKind, Stencil, Tape};
pub use data::{DataConfig, DatasetSplit, PredicateVocabulary, SyntheticScene};
pub use error::{Error, Result};
pub use layers::{ClassifierParams, FusionParams, Neighborhood, Parameters, ResCAGCNParams};
pub use loss::LossConfig;
pub use metrics::{MetricsReport, PredictionRun};
pub use pum::{GaussianParams, PumHeadParams};
pub use rng::RngState;
pub use tensor::Tensor;
pub use train::{EvalMode, EvalOptions, TrainConfig, TrainedModel};
