//! Layers, losses, initialisation and optimizers.

pub mod init;
mod layers;
pub mod loss;
mod optim;

pub use layers::{dense_forward, forward_layer, lstm_step, Layer, LayerSpec, LstmParams, LstmState, Sequential};
pub use optim::{OptimConfig, OptimKind, Optimizer, Schedule};
