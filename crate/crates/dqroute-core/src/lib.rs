//! Long-tailed classification with difficulty-aware class reweighting and
//! a three-expert mixture fused by OOD-confidence routing.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: dense `f64` tensors with reverse-mode differentiation,
//!   sized for small multilayer networks.
//! - [`datagen`]: synthetic long-tailed Gaussian-mixture datasets with an
//!   exponential class-count profile, plus balanced probe/test splits and
//!   CSV import/export.
//! - [`difficulty`]: per-class entropy/accuracy statistics, difficulty
//!   scores, multiplicative weight updates, and the quantity/difficulty
//!   blend.
//! - [`moe`]: shared two-layer trunk with three class-group experts, each
//!   carrying a classifier head and an OOD confidence head.
//! - [`losses`]: confidence routing, prediction fusion, the OOD loss
//!   variants, the weighted classification loss, and the joint objective.
//! - [`trainer`]: the end-to-end SGD training loop with per-epoch
//!   difficulty refresh, evaluation, and run-directory output.
//! - [`config`]: the resolved run configuration shared by the trainer and
//!   the CLI.

pub mod autodiff;
pub mod config;
pub mod datagen;
pub mod difficulty;
pub mod error;
pub mod losses;
pub mod moe;
pub mod trainer;

pub use error::{Error, Result};
