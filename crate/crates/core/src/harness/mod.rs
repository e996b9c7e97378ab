//! Data generation, training, evaluation and inspection.

pub mod ablate;
pub mod config;
pub mod data;
pub mod inspect;
pub mod metrics;
pub mod optim;
pub mod synth;
pub mod train;
