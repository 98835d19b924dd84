//! Resolved run configuration.
//!
//! Every field has a desk-scale default, so a config file only needs the
//! fields it overrides. The trainer echoes the fully resolved struct to
//! `config.json` in the run directory; re-running from that echo reproduces
//! the run exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{GenOptions, LongTailSpec};
use crate::error::{Error, Result};
use crate::losses::{OodLossKind, OodLossParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub imbalance_ratio: f64,
    pub max_count: usize,
    pub feature_dim: usize,
    pub tau_m: usize,
    pub tau_t: usize,
    /// How far each hard-class pair is pulled together (0 = not at all).
    pub overlap: f64,
    /// Classes whose means are pulled pairwise toward each other.
    pub hard_classes: Vec<usize>,
    pub separation: f64,
    pub noise_sigma: f64,
    pub probe_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_classes: 20,
            imbalance_ratio: 100.0,
            max_count: 500,
            feature_dim: 16,
            tau_m: 100,
            tau_t: 20,
            // 0.6 leaves the hard head pair recoverable: distinguishable
            // with effort, hopeless only near 1.0
            overlap: 0.6,
            hard_classes: vec![0, 1],
            separation: 3.0,
            noise_sigma: 1.0,
            probe_per_class: 20,
            test_per_class: 50,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // three classifier heads, three OOD heads, and their shared trunk
        // compete for this width; below ~192 the joint model starves and
        // fused accuracy falls behind the single-expert configuration
        ModelConfig { hidden_dim: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DifficultyConfig {
    /// Weight of the accuracy-deficit term in the difficulty score.
    pub lambda: f64,
    /// Sharpness of the multiplicative weight update.
    pub gamma: f64,
    /// Difficulty/quantity blend: 0 = pure quantity, 1 = pure difficulty.
    pub alpha: f64,
    pub ema_beta: f64,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        DifficultyConfig {
            lambda: 1.0,
            // multiplicative updates compound every epoch; sharpness near 1
            // drives the weights winner-take-all within tens of epochs
            gamma: 0.1,
            alpha: 0.5,
            ema_beta: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub ood_loss: OodLossKind,
    pub lambda_ood: f64,
    pub focal_g: f64,
    pub margin_m: f64,
    pub entropy_eta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            ood_loss: OodLossKind::Bce,
            // the class-weighted objective averages near 1/num_classes per
            // sample, so the OOD term needs a comparable scale or its
            // gradient dominates the shared trunk
            lambda_ood: 0.05,
            focal_g: 2.0,
            margin_m: 0.5,
            entropy_eta: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 60,
            batch_size: 64,
        }
    }
}

/// Everything a training run needs; fully determines the run's output
/// together with no other state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub difficulty: DifficultyConfig,
    pub losses: LossConfig,
    pub optimizer: OptimizerConfig,
    /// Difficulty-aware reweighting on/off; off trains with uniform class
    /// weights (the plain-CE baseline).
    pub enable_difficulty: bool,
    /// Expert mixture on/off; off trains a single general expert with no
    /// OOD loss.
    pub enable_moe: bool,
}

impl RunConfig {
    /// Desk-scale default with both mechanisms enabled.
    pub fn full() -> Self {
        RunConfig {
            enable_difficulty: true,
            enable_moe: true,
            ..RunConfig::default()
        }
    }

    /// Validate every field against the preconditions of the modules it
    /// feeds; returns the full list of violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let d = &self.dataset;
        if d.num_classes < 2 {
            problems.push(format!(
                "dataset.num_classes must be >= 2, got {}",
                d.num_classes
            ));
        }
        if !d.imbalance_ratio.is_finite() || d.imbalance_ratio < 1.0 {
            problems.push(format!(
                "dataset.imbalance_ratio must be >= 1, got {}",
                d.imbalance_ratio
            ));
        }
        if (d.max_count as f64) < d.imbalance_ratio {
            problems.push(format!(
                "dataset.max_count ({}) must be >= imbalance_ratio ({})",
                d.max_count, d.imbalance_ratio
            ));
        }
        if d.tau_t >= d.tau_m {
            problems.push(format!(
                "dataset.tau_t ({}) must be < tau_m ({})",
                d.tau_t, d.tau_m
            ));
        }
        if d.feature_dim < 2 {
            problems.push(format!(
                "dataset.feature_dim must be >= 2, got {}",
                d.feature_dim
            ));
        }
        if d.probe_per_class < 1 {
            problems.push("dataset.probe_per_class must be >= 1".to_string());
        }
        if d.test_per_class < 1 {
            problems.push("dataset.test_per_class must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&d.overlap) {
            problems.push(format!(
                "dataset.overlap must be in [0,1], got {}",
                d.overlap
            ));
        }
        if !d.noise_sigma.is_finite() || d.noise_sigma <= 0.0 {
            problems.push(format!(
                "dataset.noise_sigma must be > 0, got {}",
                d.noise_sigma
            ));
        }
        if !d.separation.is_finite() || d.separation < 0.0 {
            problems.push(format!(
                "dataset.separation must be >= 0, got {}",
                d.separation
            ));
        }
        for &c in &d.hard_classes {
            if c >= d.num_classes {
                problems.push(format!(
                    "dataset.hard_classes entry {c} out of range for {} classes",
                    d.num_classes
                ));
            }
        }
        if self.model.hidden_dim < 1 {
            problems.push("model.hidden_dim must be >= 1".to_string());
        }
        let f = &self.difficulty;
        if !f.lambda.is_finite() || f.lambda < 0.0 {
            problems.push(format!("difficulty.lambda must be >= 0, got {}", f.lambda));
        }
        if !f.gamma.is_finite() || f.gamma <= 0.0 {
            problems.push(format!("difficulty.gamma must be > 0, got {}", f.gamma));
        }
        if !(0.0..=1.0).contains(&f.alpha) {
            problems.push(format!(
                "difficulty.alpha must be in [0,1], got {}",
                f.alpha
            ));
        }
        if !(0.0..1.0).contains(&f.ema_beta) {
            problems.push(format!(
                "difficulty.ema_beta must be in [0,1), got {}",
                f.ema_beta
            ));
        }
        let l = &self.losses;
        if !l.lambda_ood.is_finite() || l.lambda_ood < 0.0 {
            problems.push(format!(
                "losses.lambda_ood must be >= 0, got {}",
                l.lambda_ood
            ));
        }
        if !l.focal_g.is_finite() || l.focal_g < 0.0 {
            problems.push(format!("losses.focal_g must be >= 0, got {}", l.focal_g));
        }
        if !l.margin_m.is_finite() || l.margin_m <= 0.0 || l.margin_m > 1.0 {
            problems.push(format!(
                "losses.margin_m must be in (0,1], got {}",
                l.margin_m
            ));
        }
        if !l.entropy_eta.is_finite() || l.entropy_eta < 0.0 {
            problems.push(format!(
                "losses.entropy_eta must be >= 0, got {}",
                l.entropy_eta
            ));
        }
        let o = &self.optimizer;
        if !o.lr0.is_finite() || o.lr0 < 0.0 {
            problems.push(format!("optimizer.lr0 must be >= 0, got {}", o.lr0));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            problems.push(format!(
                "optimizer.momentum must be in [0,1), got {}",
                o.momentum
            ));
        }
        if !o.weight_decay.is_finite() || o.weight_decay < 0.0 {
            problems.push(format!(
                "optimizer.weight_decay must be >= 0, got {}",
                o.weight_decay
            ));
        }
        if o.epochs < 1 {
            problems.push("optimizer.epochs must be >= 1".to_string());
        }
        if o.batch_size < 1 {
            problems.push("optimizer.batch_size must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn long_tail_spec(&self) -> Result<LongTailSpec> {
        let d = &self.dataset;
        LongTailSpec::new(
            d.num_classes,
            d.imbalance_ratio,
            d.max_count,
            d.tau_m,
            d.tau_t,
        )
    }

    pub fn gen_options(&self) -> GenOptions {
        let d = &self.dataset;
        GenOptions {
            feature_dim: d.feature_dim,
            seed: d.seed,
            probe_per_class: d.probe_per_class,
            test_per_class: d.test_per_class,
            separation: d.separation,
            noise_sigma: d.noise_sigma,
            overlap: d.overlap,
            hard_classes: d.hard_classes.clone(),
        }
    }

    pub fn ood_loss_params(&self) -> OodLossParams {
        OodLossParams {
            kind: self.losses.ood_loss,
            focal_g: self.losses.focal_g,
            margin_m: self.losses.margin_m,
            entropy_eta: self.losses.entropy_eta,
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Config(vec![format!("bad config JSON: {e}")]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_pretty() + "\n")?;
        Ok(())
    }
}
