//! Gradient-agreement masking for multi-environment training.
//!
//! Per-environment gradients are combined into one update whose coordinates are
//! kept only where the environments agree: the AND-mask keeps a coordinate when
//! the fraction of agreeing signs reaches a threshold, the SAND-mask weights it
//! smoothly by sign agreement and magnitude consistency. Around that core the
//! crate provides a small reverse-mode MLP, optimizers, synthetic
//! multi-environment datasets, a 2-D loss-landscape laboratory and an experiment
//! harness with random search and model selection.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod landscape;
pub mod masking;
pub mod optim;
pub mod stats;

pub use autodiff::{Activation, MlpSpec, ParamVector};
pub use datasets::{DatasetSpec, EnvDataset, Environment, SpiralsConfig, SyntheticCmnistConfig};
pub use error::{Error, Result};
pub use harness::{HParams, SelectionScheme, TrialRecord, TrialSpec};
pub use masking::{EnvGradientSet, MaskConfig, MaskMethod, MaskedUpdate, ParamMask};
pub use optim::{MomentumState, OptimConfig, OptimizerKind};
