//! Local critic training: a network is cut into layer groups, each group
//! learns from a small critic head that estimates the downstream loss, and
//! the groups can train concurrently in a pipeline.
//!
//! [`tensor`] holds arrays and reverse-mode differentiation, [`nn`] the
//! layers and optimizers, [`engine`] the partitioned model and its
//! training schedules, [`diagnostics`] the σ/gap/gradient-norm probes,
//! [`submodel`] early-exit heads and their cost, and [`run`] ties these to
//! a [`config::RunConfig`].

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod run;
pub mod submodel;
pub mod tensor;

pub use config::RunConfig;
pub use engine::{Architecture, PartitionedModel, StepInput, StepRecord, Trainer};
pub use error::{Error, Result};
pub use nn::{LayerSpec, OptimConfig, Sequential};
pub use submodel::{Complexity, SubModel};
pub use tensor::{Graph, Tape, Tensor, Var};
