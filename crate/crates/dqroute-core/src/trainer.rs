//! Joint training loop: per-epoch difficulty refresh, minibatch SGD with
//! momentum/weight-decay and a linearly decaying learning rate, and
//! balanced-test evaluation with many/medium/few breakdowns.
//!
//! Determinism: one config seed fixes the dataset, the parameter init, and
//! every epoch's batch order (disjoint ChaCha streams); batch reductions
//! are sequential, so identical runs produce bit-identical metrics.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::config::RunConfig;
use crate::datagen::{self, Dataset, LongTailSpec, ShotSplit};
use crate::difficulty::{self, ClassStats};
use crate::error::{Error, Result};
use crate::losses;
use crate::moe::{
    self, BankConfig, Checkpoint, ExpertBank, ExpertSpec, PartitionWarning, NUM_EXPERTS,
};

pub const METRICS_CSV_HEADER: &str =
    "epoch,loss_cls,loss_ood,loss_total,acc_all,acc_many,acc_med,acc_few";

// Dataset streams occupy 0..4 of the run seed; batch shuffling gets its own
// block so no stream is reused.
const SHUFFLE_STREAM_BASE: u64 = 1000;
const MODEL_SEED_SALT: u64 = 0xA076_1D64_78BD_642F;

/// Parameter-init seed derived from the run seed.
pub fn model_seed(data_seed: u64) -> u64 {
    data_seed ^ MODEL_SEED_SALT
}

/// Sample visit order for one epoch. Public so reference implementations
/// can replay the trainer's exact batches.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM_BASE + epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// SGD with momentum, weight decay, and a linear learning-rate decay.
///
/// The step is `v ← μ·v + g + wd·p; p ← p − lr(epoch)·v` with
/// `lr(epoch) = lr0·(1 − epoch/total_epochs)`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_epochs: usize,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(
        lr0: f64,
        momentum: f64,
        weight_decay: f64,
        total_epochs: usize,
        param_sizes: &[usize],
    ) -> Self {
        Sgd {
            lr0,
            momentum,
            weight_decay,
            total_epochs,
            velocity: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr0 * (1.0 - epoch as f64 / self.total_epochs as f64)
    }

    /// One update over every parameter array; `grads` must align with
    /// `params` in order and shape.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Vec<f64>)],
        grads: &[Vec<f64>],
        epoch: usize,
    ) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), self.velocity.len());
        let lr = self.lr(epoch);
        for ((_, param), (grad, vel)) in params
            .iter_mut()
            .zip(grads.iter().zip(self.velocity.iter_mut()))
        {
            for i in 0..param.len() {
                vel[i] = self.momentum * vel[i] + grad[i] + self.weight_decay * param[i];
                param[i] -= lr * vel[i];
            }
        }
    }
}

/// Fused predictions plus routing weights for a whole dataset.
pub struct Prediction {
    /// Row-major `[N × C]` fused class distribution.
    pub fused: Vec<f64>,
    /// Routing weight per expert per sample.
    pub alpha: [Vec<f64>; NUM_EXPERTS],
}

/// Run the bank over `features` in chunks. With the mixture disabled, the
/// fused distribution is the general expert's softmax and routing is fixed
/// at (1, 0, 0).
pub fn predict(
    bank: &ExpertBank,
    features: &[f64],
    n: usize,
    enable_moe: bool,
    chunk: usize,
) -> Result<Prediction> {
    let d = bank.cfg.input_dim;
    let c = bank.cfg.num_classes;
    let chunk = chunk.max(1);
    let mut fused = Vec::with_capacity(n * c);
    let mut alpha = [
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    ];
    let mut start = 0;
    while start < n {
        let rows = chunk.min(n - start);
        let mut g = Graph::new();
        let vars = bank.insert_into(&mut g, false)?;
        let x = g.constant(features[start * d..(start + rows) * d].to_vec(), &[rows, d])?;
        let out = moe::forward(&mut g, &vars, x)?;
        if enable_moe {
            let probs = [
                g.softmax(out.logits[0])?,
                g.softmax(out.logits[1])?,
                g.softmax(out.logits[2])?,
            ];
            let routing = losses::route(&mut g, &out.scores)?;
            let fused_t = losses::fuse(&mut g, &routing, &probs)?;
            fused.extend_from_slice(g.value(fused_t));
            for k in 0..NUM_EXPERTS {
                alpha[k].extend_from_slice(g.value(routing[k]));
            }
        } else {
            let probs0 = g.softmax(out.logits[0])?;
            fused.extend_from_slice(g.value(probs0));
            alpha[0].extend(std::iter::repeat_n(1.0, rows));
            alpha[1].extend(std::iter::repeat_n(0.0, rows));
            alpha[2].extend(std::iter::repeat_n(0.0, rows));
        }
        start += rows;
    }
    Ok(Prediction { fused, alpha })
}

/// Accuracy breakdown of one evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub acc_all: f64,
    pub acc_many: f64,
    pub acc_med: f64,
    pub acc_few: f64,
    pub per_class: Vec<f64>,
    /// Mean routing weight, indexed `[expert][many|medium|few]`.
    pub routing_mean: [[f64; 3]; NUM_EXPERTS],
}

/// Argmax of the fused distribution (ties toward the lower class index),
/// scored overall, per class, and per shot group.
pub fn evaluate(
    bank: &ExpertBank,
    dataset: &Dataset,
    split: &ShotSplit,
    enable_moe: bool,
    chunk: usize,
) -> Result<EvalMetrics> {
    let c = bank.cfg.num_classes;
    let pred = predict(bank, &dataset.features, dataset.len(), enable_moe, chunk)?;
    let mut correct = vec![0usize; c];
    let mut seen = vec![0usize; c];
    for (i, &y) in dataset.labels.iter().enumerate() {
        let row = &pred.fused[i * c..(i + 1) * c];
        if difficulty::argmax_low(row) == y {
            correct[y] += 1;
        }
        seen[y] += 1;
    }
    let per_class: Vec<f64> = correct
        .iter()
        .zip(&seen)
        .map(|(&k, &n)| k as f64 / n as f64)
        .collect();
    let group_acc = |classes: &[usize]| -> f64 {
        let k: usize = classes.iter().map(|&cl| correct[cl]).sum();
        let n: usize = classes.iter().map(|&cl| seen[cl]).sum();
        k as f64 / n as f64
    };
    let total_correct: usize = correct.iter().sum();
    let acc_all = total_correct as f64 / dataset.len() as f64;

    // mean routing weight per expert over each group's samples
    let mut routing_sum = [[0.0f64; 3]; NUM_EXPERTS];
    let mut group_count = [0usize; 3];
    let group_of = |y: usize| -> usize {
        match split.group_of(y) {
            datagen::ShotGroup::Many => 0,
            datagen::ShotGroup::Medium => 1,
            datagen::ShotGroup::Few => 2,
        }
    };
    for (i, &y) in dataset.labels.iter().enumerate() {
        let gi = group_of(y);
        group_count[gi] += 1;
        for k in 0..NUM_EXPERTS {
            routing_sum[k][gi] += pred.alpha[k][i];
        }
    }
    let mut routing_mean = [[0.0f64; 3]; NUM_EXPERTS];
    for k in 0..NUM_EXPERTS {
        for gi in 0..3 {
            routing_mean[k][gi] = routing_sum[k][gi] / group_count[gi] as f64;
        }
    }

    Ok(EvalMetrics {
        acc_all,
        acc_many: group_acc(&split.many),
        acc_med: group_acc(&split.medium),
        acc_few: group_acc(&split.few),
        per_class,
        routing_mean,
    })
}

/// One epoch's losses, accuracies, and routing summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_ood: f64,
    pub loss_total: f64,
    pub acc_all: f64,
    pub acc_many: f64,
    pub acc_med: f64,
    pub acc_few: f64,
    pub per_class_acc: Vec<f64>,
    pub routing_mean: [[f64; 3]; NUM_EXPERTS],
}

impl EpochReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss_cls,
            self.loss_ood,
            self.loss_total,
            self.acc_all,
            self.acc_many,
            self.acc_med,
            self.acc_few
        )
    }
}

/// Everything a finished run hands back.
pub struct TrainOutcome {
    pub reports: Vec<EpochReport>,
    pub bank: ExpertBank,
    pub spec: LongTailSpec,
    pub warnings: Vec<PartitionWarning>,
}

impl TrainOutcome {
    pub fn final_report(&self) -> &EpochReport {
        self.reports.last().expect("at least one epoch")
    }
}

struct RunFiles {
    metrics: BufWriter<File>,
    stats: BufWriter<File>,
}

fn batch_of(dataset: &Dataset, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let d = dataset.feature_dim;
    let mut features = Vec::with_capacity(idx.len() * d);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        features.extend_from_slice(dataset.row(i));
        labels.push(dataset.labels[i]);
    }
    (features, labels)
}

/// Losses and parameter gradients of one minibatch at the current weights.
pub struct StepResult {
    pub loss_cls: f64,
    pub loss_ood: f64,
    pub loss_total: f64,
    /// Gradients in [`ExpertBank::param_refs`] order.
    pub grads: Vec<Vec<f64>>,
}

/// Build the joint objective for one batch and differentiate it. Pure in
/// `(config, bank, batch)`; the trainer calls this once per minibatch.
pub fn train_step(
    config: &RunConfig,
    bank: &ExpertBank,
    experts: &[ExpertSpec; NUM_EXPERTS],
    class_weights: &[f64],
    features: Vec<f64>,
    labels: &[usize],
) -> Result<StepResult> {
    let b = labels.len();
    let mut g = Graph::new();
    let vars = bank.insert_into(&mut g, true)?;
    let x = g.constant(features, &[b, bank.cfg.input_dim])?;
    let out = moe::forward(&mut g, &vars, x)?;

    let (cls_t, ood_t, total_t): (Tensor, Tensor, Tensor) = if config.enable_moe {
        let probs = [
            g.softmax(out.logits[0])?,
            g.softmax(out.logits[1])?,
            g.softmax(out.logits[2])?,
        ];
        let routing = losses::route(&mut g, &out.scores)?;
        let targets = losses::ood_targets(experts, labels);
        let masks = [
            g.constant(targets[0].clone(), &[b])?,
            g.constant(targets[1].clone(), &[b])?,
            g.constant(targets[2].clone(), &[b])?,
        ];
        let cls = losses::cls_loss(&mut g, &routing, &probs, labels, class_weights, &masks)?;
        let params = config.ood_loss_params();
        let mut oodacc: Option<Tensor> = None;
        for k in 0..NUM_EXPERTS {
            let lk = losses::ood_loss(&mut g, &params, out.scores[k], masks[k], probs[k])?;
            oodacc = Some(match oodacc {
                Some(t) => g.add(t, lk)?,
                None => lk,
            });
        }
        let ood = oodacc.expect("three experts");
        let total = losses::total_loss(&mut g, cls, ood, config.losses.lambda_ood)?;
        (cls, ood, total)
    } else {
        let probs0 = g.softmax(out.logits[0])?;
        let cls = losses::weighted_ce(&mut g, probs0, labels, class_weights)?;
        let zero = g.scalar(0.0);
        (cls, zero, cls)
    };

    let loss_cls = g.scalar_value(cls_t);
    let loss_ood = g.scalar_value(ood_t);
    let loss_total = g.scalar_value(total_t);
    g.backward(total_t)?;
    let grads = vars
        .all()
        .iter()
        .map(|t| g.grad(*t).expect("parameter gradient").to_vec())
        .collect();
    Ok(StepResult {
        loss_cls,
        loss_ood,
        loss_total,
        grads,
    })
}

/// Full training run. When `out_dir` is given, writes `config.json`,
/// `metrics.csv`, `class_stats.csv`, and the final `model.json` there.
pub fn train(config: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_with_observer(config, out_dir, |_| {})
}

/// [`train`] with a per-epoch callback.
pub fn train_with_observer(
    config: &RunConfig,
    out_dir: Option<&Path>,
    mut observer: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = config.long_tail_spec()?;
    let opts = config.gen_options();
    let (train_ds, probe_ds, test_ds) = datagen::generate(&spec, &opts)?;
    let split = spec.shot_split();
    let (experts, warnings) = moe::partition(&spec);
    let c = spec.num_classes;
    let bank_cfg = BankConfig {
        input_dim: config.dataset.feature_dim,
        hidden_dim: config.model.hidden_dim,
        num_classes: c,
    };
    let mut bank = ExpertBank::init(model_seed(config.dataset.seed), bank_cfg);
    let mut stats = ClassStats::new(&spec);
    let uniform = vec![1.0 / c as f64; c];
    let param_sizes: Vec<usize> = bank.param_refs().iter().map(|(_, p)| p.len()).collect();
    let opt = &config.optimizer;
    let mut sgd = Sgd::new(
        opt.lr0,
        opt.momentum,
        opt.weight_decay,
        opt.epochs,
        &param_sizes,
    );

    let mut files = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            config.save(&dir.join("config.json"))?;
            let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
            writeln!(metrics, "{METRICS_CSV_HEADER}")?;
            let mut stats_file = BufWriter::new(File::create(dir.join("class_stats.csv"))?);
            writeln!(stats_file, "{}", difficulty::STATS_CSV_HEADER)?;
            Some(RunFiles {
                metrics,
                stats: stats_file,
            })
        }
        None => None,
    };

    let mut reports = Vec::with_capacity(opt.epochs);
    for epoch in 0..opt.epochs {
        // difficulty refresh, once per epoch before the first batch
        let probe_pred = predict(
            &bank,
            &probe_ds.features,
            probe_ds.len(),
            config.enable_moe,
            opt.batch_size,
        )?;
        stats.measure(
            &probe_pred.fused,
            &probe_ds.labels,
            config.difficulty.ema_beta,
        )?;
        if config.enable_difficulty {
            stats.refresh_weights(
                config.difficulty.lambda,
                config.difficulty.gamma,
                config.difficulty.alpha,
            )?;
        } else {
            // stats stay informative for the dump; training weights stay flat
            stats.difficulty = difficulty::difficulty_scores(
                &stats.entropy,
                &stats.smoothed_accuracy,
                config.difficulty.lambda,
            );
            stats.blended = uniform.clone();
        }
        if let Some(f) = files.as_mut() {
            difficulty::append_stats_rows(&mut f.stats, epoch, &spec, &stats)?;
        }

        let order = epoch_order(config.dataset.seed, epoch, train_ds.len());
        let mut sums = (0.0, 0.0, 0.0);
        for (batch_idx, idx) in order.chunks(opt.batch_size).enumerate() {
            let (bx, by) = batch_of(&train_ds, idx);
            let step = train_step(config, &bank, &experts, &stats.blended, bx, &by)?;
            if !(step.loss_cls.is_finite()
                && step.loss_ood.is_finite()
                && step.loss_total.is_finite())
            {
                if let Some(dir) = out_dir {
                    let dump = serde_json::json!({
                        "epoch": epoch,
                        "batch": batch_idx,
                        "loss_cls": step.loss_cls,
                        "loss_ood": step.loss_ood,
                        "loss_total": step.loss_total,
                    });
                    let _ = std::fs::write(dir.join("abort.json"), dump.to_string());
                }
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    loss_cls: step.loss_cls,
                    loss_ood: step.loss_ood,
                    loss_total: step.loss_total,
                });
            }
            let weight = idx.len() as f64;
            sums.0 += step.loss_cls * weight;
            sums.1 += step.loss_ood * weight;
            sums.2 += step.loss_total * weight;
            let mut params = bank.param_refs_mut();
            sgd.step(&mut params, &step.grads, epoch);
        }
        let n = train_ds.len() as f64;

        let eval = evaluate(&bank, &test_ds, &split, config.enable_moe, opt.batch_size)?;
        let report = EpochReport {
            epoch,
            loss_cls: sums.0 / n,
            loss_ood: sums.1 / n,
            loss_total: sums.2 / n,
            acc_all: eval.acc_all,
            acc_many: eval.acc_many,
            acc_med: eval.acc_med,
            acc_few: eval.acc_few,
            per_class_acc: eval.per_class,
            routing_mean: eval.routing_mean,
        };
        if let Some(f) = files.as_mut() {
            writeln!(f.metrics, "{}", report.csv_row())?;
        }
        observer(&report);
        reports.push(report);
    }

    if let Some(f) = files.as_mut() {
        f.metrics.flush()?;
        f.stats.flush()?;
    }
    if let Some(dir) = out_dir {
        Checkpoint::from_bank(&bank, config).save(&dir.join("model.json"))?;
    }
    Ok(TrainOutcome {
        reports,
        bank,
        spec,
        warnings,
    })
}
