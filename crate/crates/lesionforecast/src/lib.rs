//! Treatment-conditioned diffusion forecasting of future lesion masks.
//!
//! The crate is organized around a small differentiable-array engine
//! ([`numerics`]), a variance-preserving log-SNR noise schedule
//! ([`schedule`]), pseudo-2D slab restructuring of 3D volumes ([`slab`]),
//! a conditional UNet with a control adapter ([`model`]), two-stage
//! training loops ([`train`]), guided ancestral sampling with ensembling
//! ([`sample`]), a calibrated synthetic cohort generator ([`synthdata`]),
//! and the downstream evaluation suite with population baselines
//! ([`eval`]). The [`cli`] module wires the stages into subcommands.

pub mod cli;
pub mod config;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod sample;
pub mod schedule;
pub mod slab;
pub mod synthdata;
pub mod train;

pub use numerics::{Real, Tensor};
