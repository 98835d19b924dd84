//! Per-class difficulty statistics and the class-weight machinery.
//!
//! Each epoch the trainer measures mean prediction entropy and accuracy per
//! class on the balanced probe split, turns them into a difficulty score,
//! runs a multiplicative update on the difficulty weights, and blends the
//! result with fixed inverse-frequency quantity weights.

use std::io::Write;

use crate::autodiff::LOG_FLOOR;
use crate::datagen::LongTailSpec;
use crate::error::{Error, Result};

/// Per-class statistics carried across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    /// Mean probe entropy per class, in nats.
    pub entropy: Vec<f64>,
    /// Raw probe accuracy from the latest measurement.
    pub raw_accuracy: Vec<f64>,
    /// Exponentially smoothed probe accuracy.
    pub smoothed_accuracy: Vec<f64>,
    /// Latest difficulty scores.
    pub difficulty: Vec<f64>,
    /// Difficulty weights, kept normalized to sum 1.
    pub weights: Vec<f64>,
    /// Quantity weights (normalized inverse frequency), fixed at construction.
    pub quantity: Vec<f64>,
    /// Blend of difficulty and quantity weights, sum 1.
    pub blended: Vec<f64>,
    /// Number of completed measurements.
    pub epoch: usize,
    initialized: bool,
}

impl ClassStats {
    /// Uniform difficulty weights, quantity weights from the count profile.
    pub fn new(spec: &LongTailSpec) -> Self {
        let c = spec.num_classes;
        let quantity = quantity_weights(&spec.counts);
        ClassStats {
            entropy: vec![0.0; c],
            raw_accuracy: vec![0.0; c],
            smoothed_accuracy: vec![0.0; c],
            difficulty: vec![0.0; c],
            weights: vec![1.0 / c as f64; c],
            quantity,
            // overwritten by the first refresh; neutral until then
            blended: vec![1.0 / c as f64; c],
            epoch: 0,
            initialized: false,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    /// Fold one probe measurement into the stats: per-class mean entropy,
    /// raw accuracy, and the accuracy EMA (first observation initializes).
    pub fn measure(
        &mut self,
        probe_probs: &[f64],
        probe_labels: &[usize],
        ema_beta: f64,
    ) -> Result<()> {
        let c = self.num_classes();
        let (entropy, raw) = class_entropy_accuracy(probe_probs, probe_labels, c)?;
        if self.initialized {
            for j in 0..c {
                self.smoothed_accuracy[j] =
                    ema_beta * self.smoothed_accuracy[j] + (1.0 - ema_beta) * raw[j];
            }
        } else {
            self.smoothed_accuracy = raw.clone();
            self.initialized = true;
        }
        self.entropy = entropy;
        self.raw_accuracy = raw;
        self.epoch += 1;
        Ok(())
    }

    /// Recompute difficulty, advance the multiplicative weights, and blend.
    pub fn refresh_weights(&mut self, lambda: f64, gamma: f64, alpha: f64) -> Result<()> {
        self.difficulty = difficulty_scores(&self.entropy, &self.smoothed_accuracy, lambda);
        self.weights = multiplicative_update(&self.weights, &self.difficulty, gamma)?;
        self.blended = blend_weights(&self.weights, &self.quantity, alpha)?;
        Ok(())
    }
}

/// Mean softmax entropy and argmax accuracy per class over a probe matrix
/// (`probs` is row-major `[N × num_classes]`). Ties at the argmax break
/// toward the lower class index. Errors if any class has no probe sample.
pub fn class_entropy_accuracy(
    probs: &[f64],
    labels: &[usize],
    num_classes: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = labels.len();
    debug_assert_eq!(probs.len(), n * num_classes);
    let mut entropy_sum = vec![0.0; num_classes];
    let mut correct = vec![0usize; num_classes];
    let mut seen = vec![0usize; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::IndexOutOfRange {
                index: y,
                bound: num_classes,
            });
        }
        let row = &probs[i * num_classes..(i + 1) * num_classes];
        entropy_sum[y] += entropy_nats(row);
        if argmax_low(row) == y {
            correct[y] += 1;
        }
        seen[y] += 1;
    }
    for (class, &count) in seen.iter().enumerate() {
        if count == 0 {
            return Err(Error::Coverage { class });
        }
    }
    let entropy: Vec<f64> = entropy_sum
        .iter()
        .zip(&seen)
        .map(|(s, &n)| s / n as f64)
        .collect();
    let accuracy: Vec<f64> = correct
        .iter()
        .zip(&seen)
        .map(|(c, &n)| *c as f64 / n as f64)
        .collect();
    Ok((entropy, accuracy))
}

/// Shannon entropy of a probability row in nats; zero entries contribute 0.
pub fn entropy_nats(row: &[f64]) -> f64 {
    -row.iter()
        .map(|&p| {
            if p > 0.0 {
                p * p.max(LOG_FLOOR).ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

/// Argmax with ties broken toward the lower index.
pub fn argmax_low(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Difficulty per class: normalized entropy plus `lambda` times the
/// normalized accuracy deficit. Degenerate maxima zero the entropy term or
/// saturate the accuracy term at `lambda` instead of dividing by zero.
pub fn difficulty_scores(entropy: &[f64], accuracy: &[f64], lambda: f64) -> Vec<f64> {
    let h_max = entropy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let a_max = accuracy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    entropy
        .iter()
        .zip(accuracy)
        .map(|(&h, &a)| {
            let h_term = if h_max > 0.0 { h / h_max } else { 0.0 };
            let a_term = if a_max > 0.0 {
                lambda * (1.0 - a / a_max)
            } else {
                lambda
            };
            h_term + a_term
        })
        .collect()
}

/// One multiplicative-weights step: `w_c ∝ w_c · exp(gamma · d_c)`,
/// renormalized. The exponent is shifted by `max(d)` for stability, which
/// cancels in the normalization.
pub fn multiplicative_update(weights: &[f64], difficulty: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if difficulty.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite {
            context: "difficulty scores in weight update".to_string(),
        });
    }
    let d_max = difficulty.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnormalized: Vec<f64> = weights
        .iter()
        .zip(difficulty)
        .map(|(&w, &d)| w * (gamma * (d - d_max)).exp())
        .collect();
    let total: f64 = unnormalized.iter().sum();
    Ok(unnormalized.iter().map(|u| u / total).collect())
}

/// Normalized inverse-frequency quantity weights.
pub fn quantity_weights(counts: &[usize]) -> Vec<f64> {
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
    let total: f64 = inv.iter().sum();
    inv.iter().map(|v| v / total).collect()
}

/// Convex blend `alpha · w + (1 − alpha) · q`.
pub fn blend_weights(weights: &[f64], quantity: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(vec![format!(
            "blend alpha must be in [0,1], got {alpha}"
        )]));
    }
    Ok(weights
        .iter()
        .zip(quantity)
        .map(|(&w, &q)| alpha * w + (1.0 - alpha) * q)
        .collect())
}

/// Header of the per-epoch stats dump.
pub const STATS_CSV_HEADER: &str = "epoch,class,n_c,H_c,A_c,d_c,w_c,q_c,w_blend";

/// Append one row per class for the current epoch to a stats dump.
pub fn append_stats_rows(
    out: &mut impl Write,
    epoch: usize,
    spec: &LongTailSpec,
    stats: &ClassStats,
) -> std::io::Result<()> {
    for c in 0..stats.num_classes() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            epoch,
            c,
            spec.counts[c],
            stats.entropy[c],
            stats.smoothed_accuracy[c],
            stats.difficulty[c],
            stats.weights[c],
            stats.quantity[c],
            stats.blended[c],
        )?;
    }
    Ok(())
}
