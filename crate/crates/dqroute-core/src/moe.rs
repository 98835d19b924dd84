//! Shared trunk plus three class-group experts.
//!
//! The trunk is a two-layer ReLU MLP (d → h → h). Every expert reads the
//! same trunk output and carries two heads: a full-width classifier
//! (h → C) and an OOD confidence head (h → 1, sigmoid). Expert class
//! groups nest: the general expert covers all classes, the medium expert
//! covers classes with fewer than `tau_m` training samples, and the tail
//! expert those below `tau_t`.
//!
//! Classifier heads output logits over the full class space regardless of
//! group; group membership only masks which samples train each head.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::config::RunConfig;
use crate::datagen::LongTailSpec;
use crate::error::{Error, Result};

pub const NUM_EXPERTS: usize = 3;

/// One expert's class group and index.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSpec {
    /// 0 = general, 1 = medium, 2 = tail.
    pub index: usize,
    /// Per-class membership mask.
    pub classes: Vec<bool>,
}

impl ExpertSpec {
    pub fn covers(&self, class: usize) -> bool {
        self.classes.get(class).copied().unwrap_or(false)
    }

    pub fn class_set(&self) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter_map(|(c, &m)| m.then_some(c))
            .collect()
    }

    /// 1.0 for samples whose label the expert covers, else 0.0.
    pub fn sample_mask(&self, labels: &[usize]) -> Vec<f64> {
        labels
            .iter()
            .map(|&y| if self.covers(y) { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Degenerate-partition conditions worth surfacing to the caller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PartitionWarning {
    /// No class falls below `tau_t`; the tail expert has nothing to train on.
    EmptyTailGroup,
    /// Every class falls below `tau_m`; the medium expert duplicates the
    /// general one.
    MediumEqualsGeneral,
}

impl fmt::Display for PartitionWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionWarning::EmptyTailGroup => {
                write!(f, "tail expert group is empty (no class count below tau_t)")
            }
            PartitionWarning::MediumEqualsGeneral => {
                write!(f, "medium expert group equals the general group")
            }
        }
    }
}

/// Split classes into the three nested expert groups by training count.
pub fn partition(spec: &LongTailSpec) -> ([ExpertSpec; NUM_EXPERTS], Vec<PartitionWarning>) {
    let general: Vec<bool> = vec![true; spec.num_classes];
    let medium: Vec<bool> = spec.counts.iter().map(|&n| n < spec.tau_m).collect();
    let tail: Vec<bool> = spec.counts.iter().map(|&n| n < spec.tau_t).collect();
    let mut warnings = Vec::new();
    if !tail.iter().any(|&m| m) {
        warnings.push(PartitionWarning::EmptyTailGroup);
    }
    if medium.iter().all(|&m| m) {
        warnings.push(PartitionWarning::MediumEqualsGeneral);
    }
    (
        [
            ExpertSpec {
                index: 0,
                classes: general,
            },
            ExpertSpec {
                index: 1,
                classes: medium,
            },
            ExpertSpec {
                index: 2,
                classes: tail,
            },
        ],
        warnings,
    )
}

/// Model dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

/// Heads of a single expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertHeads {
    pub cls_w: Vec<f64>,
    pub cls_b: Vec<f64>,
    pub ood_w: Vec<f64>,
    pub ood_b: Vec<f64>,
}

/// Trunk and head parameters for the whole mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    pub cfg: BankConfig,
    pub trunk_w1: Vec<f64>,
    pub trunk_b1: Vec<f64>,
    pub trunk_w2: Vec<f64>,
    pub trunk_b2: Vec<f64>,
    pub experts: [ExpertHeads; NUM_EXPERTS],
}

impl ExpertBank {
    /// Weights from N(0, 1/fan_in), biases zero; one seed fixes every draw.
    pub fn init(seed: u64, cfg: BankConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, c) = (cfg.input_dim, cfg.hidden_dim, cfg.num_classes);
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        let trunk_w1 = draw(d * h, d);
        let trunk_b1 = vec![0.0; h];
        let trunk_w2 = draw(h * h, h);
        let trunk_b2 = vec![0.0; h];
        let experts = std::array::from_fn(|_| ExpertHeads {
            cls_w: draw(h * c, h),
            cls_b: vec![0.0; c],
            ood_w: draw(h, h),
            ood_b: vec![0.0; 1],
        });
        ExpertBank {
            cfg,
            trunk_w1,
            trunk_b1,
            trunk_w2,
            trunk_b2,
            experts,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_refs().iter().map(|(_, p)| p.len()).sum()
    }

    /// Checkpoint keys in a fixed order, paired with their arrays.
    pub fn param_refs(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out: Vec<(String, &Vec<f64>)> = vec![
            ("trunk.w1".to_string(), &self.trunk_w1),
            ("trunk.b1".to_string(), &self.trunk_b1),
            ("trunk.w2".to_string(), &self.trunk_w2),
            ("trunk.b2".to_string(), &self.trunk_b2),
        ];
        for (k, heads) in self.experts.iter().enumerate() {
            let tag = k + 1;
            out.push((format!("expert{tag}.cls.w"), &heads.cls_w));
            out.push((format!("expert{tag}.cls.b"), &heads.cls_b));
            out.push((format!("expert{tag}.ood.w"), &heads.ood_w));
            out.push((format!("expert{tag}.ood.b"), &heads.ood_b));
        }
        out
    }

    pub fn param_refs_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = vec![
            ("trunk.w1".to_string(), &mut self.trunk_w1),
            ("trunk.b1".to_string(), &mut self.trunk_b1),
            ("trunk.w2".to_string(), &mut self.trunk_w2),
            ("trunk.b2".to_string(), &mut self.trunk_b2),
        ];
        for (k, heads) in self.experts.iter_mut().enumerate() {
            let tag = k + 1;
            out.push((format!("expert{tag}.cls.w"), &mut heads.cls_w));
            out.push((format!("expert{tag}.cls.b"), &mut heads.cls_b));
            out.push((format!("expert{tag}.ood.w"), &mut heads.ood_w));
            out.push((format!("expert{tag}.ood.b"), &mut heads.ood_b));
        }
        out
    }

    /// Register every parameter array in a graph. With `trainable` false the
    /// bank enters as constants (inference).
    pub fn insert_into(&self, g: &mut Graph, trainable: bool) -> Result<BankVars> {
        let (d, h, c) = (
            self.cfg.input_dim,
            self.cfg.hidden_dim,
            self.cfg.num_classes,
        );
        let put = |data: &Vec<f64>, shape: &[usize], g: &mut Graph| -> Result<Tensor> {
            if trainable {
                g.parameter(data.clone(), shape)
            } else {
                g.constant(data.clone(), shape)
            }
        };
        Ok(BankVars {
            trunk_w1: put(&self.trunk_w1, &[d, h], g)?,
            trunk_b1: put(&self.trunk_b1, &[h], g)?,
            trunk_w2: put(&self.trunk_w2, &[h, h], g)?,
            trunk_b2: put(&self.trunk_b2, &[h], g)?,
            experts: [
                ExpertVars {
                    cls_w: put(&self.experts[0].cls_w, &[h, c], g)?,
                    cls_b: put(&self.experts[0].cls_b, &[c], g)?,
                    ood_w: put(&self.experts[0].ood_w, &[h, 1], g)?,
                    ood_b: put(&self.experts[0].ood_b, &[1], g)?,
                },
                ExpertVars {
                    cls_w: put(&self.experts[1].cls_w, &[h, c], g)?,
                    cls_b: put(&self.experts[1].cls_b, &[c], g)?,
                    ood_w: put(&self.experts[1].ood_w, &[h, 1], g)?,
                    ood_b: put(&self.experts[1].ood_b, &[1], g)?,
                },
                ExpertVars {
                    cls_w: put(&self.experts[2].cls_w, &[h, c], g)?,
                    cls_b: put(&self.experts[2].cls_b, &[c], g)?,
                    ood_w: put(&self.experts[2].ood_w, &[h, 1], g)?,
                    ood_b: put(&self.experts[2].ood_b, &[1], g)?,
                },
            ],
        })
    }
}

/// Graph handles for one expert's heads.
#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub cls_w: Tensor,
    pub cls_b: Tensor,
    pub ood_w: Tensor,
    pub ood_b: Tensor,
}

/// Graph handles for the whole bank, in insertion order matching
/// [`ExpertBank::param_refs`].
#[derive(Debug, Clone, Copy)]
pub struct BankVars {
    pub trunk_w1: Tensor,
    pub trunk_b1: Tensor,
    pub trunk_w2: Tensor,
    pub trunk_b2: Tensor,
    pub experts: [ExpertVars; NUM_EXPERTS],
}

impl BankVars {
    /// Parameter handles in checkpoint order.
    pub fn all(&self) -> Vec<Tensor> {
        let mut out = vec![self.trunk_w1, self.trunk_b1, self.trunk_w2, self.trunk_b2];
        for e in &self.experts {
            out.extend([e.cls_w, e.cls_b, e.ood_w, e.ood_b]);
        }
        out
    }
}

/// Per-expert outputs of one forward pass.
pub struct ForwardOut {
    /// Classifier logits, `[B × C]` per expert.
    pub logits: [Tensor; NUM_EXPERTS],
    /// OOD confidence scores in (0,1), `[B]` per expert.
    pub scores: [Tensor; NUM_EXPERTS],
    /// Shared trunk output, `[B × h]`.
    pub trunk: Tensor,
}

/// Run the trunk and all six heads on a batch `x: [B × d]`.
pub fn forward(g: &mut Graph, vars: &BankVars, x: Tensor) -> Result<ForwardOut> {
    let batch = g.shape(x)[0];
    let pre1 = g.matmul(x, vars.trunk_w1)?;
    let pre1 = g.add_rows(pre1, vars.trunk_b1)?;
    let h1 = g.relu(pre1);
    let pre2 = g.matmul(h1, vars.trunk_w2)?;
    let pre2 = g.add_rows(pre2, vars.trunk_b2)?;
    let trunk = g.relu(pre2);

    let mut logits = Vec::with_capacity(NUM_EXPERTS);
    let mut scores = Vec::with_capacity(NUM_EXPERTS);
    for e in &vars.experts {
        let l = g.matmul(trunk, e.cls_w)?;
        let l = g.add_rows(l, e.cls_b)?;
        logits.push(l);
        let s = g.matmul(trunk, e.ood_w)?;
        let s = g.add_rows(s, e.ood_b)?;
        let s = g.reshape(s, &[batch])?;
        scores.push(g.sigmoid(s));
    }
    Ok(ForwardOut {
        logits: [logits[0], logits[1], logits[2]],
        scores: [scores[0], scores[1], scores[2]],
        trunk,
    })
}

/// Serialized checkpoint: resolved config echo plus flat parameter arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn from_bank(bank: &ExpertBank, config: &RunConfig) -> Self {
        let params = bank
            .param_refs()
            .into_iter()
            .map(|(k, v)| (k, v.clone()))
            .collect();
        Checkpoint {
            config: config.clone(),
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Io(format!("checkpoint serialization: {e}")))?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: format!("bad checkpoint JSON: {e}"),
        })
    }

    /// Rebuild the bank, checking that every array has the size the config
    /// implies.
    pub fn to_bank(&self) -> Result<ExpertBank> {
        let cfg = BankConfig {
            input_dim: self.config.dataset.feature_dim,
            hidden_dim: self.config.model.hidden_dim,
            num_classes: self.config.dataset.num_classes,
        };
        let mut bank = ExpertBank::init(0, cfg);
        for (key, target) in bank.param_refs_mut() {
            let stored = self.params.get(&key).ok_or_else(|| {
                Error::Config(vec![format!("checkpoint missing parameter {key}")])
            })?;
            if stored.len() != target.len() {
                return Err(Error::Config(vec![format!(
                    "checkpoint parameter {key} has length {}, expected {}",
                    stored.len(),
                    target.len()
                )]));
            }
            target.copy_from_slice(stored);
        }
        Ok(bank)
    }
}
