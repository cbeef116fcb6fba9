//! Desk-scale laboratory for transferable targeted adversarial attacks.
//!
//! The crate implements an iterative targeted attack (Nesterov momentum,
//! scale copies, stochastic resize-and-pad, kernel-smoothed gradients) over
//! an ensemble of small self-trained convolutional models, with per-iteration
//! model augmentation by diversified weight pruning and the ghost-network /
//! dual-stage erosion baselines, plus the measurement side: leave-one-out
//! transfer tables, perturbation orthogonality, prunable-rate ablation,
//! accuracy-decay curves, and class activation heatmaps.

pub mod attack;
pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod diag;
pub mod error;
pub mod export;
pub mod graph;
pub mod models;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
