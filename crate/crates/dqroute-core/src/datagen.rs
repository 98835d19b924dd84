//! Synthetic long-tailed datasets.
//!
//! Class counts follow an exponential profile between the head count and
//! head/IR at the tail. Features are isotropic Gaussians around
//! deterministic, seed-dependent class means; an overlap knob pulls chosen
//! classes toward a partner mean so that difficulty can be decoupled from
//! frequency (frequent classes can be made hard).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Class-count boundary for the many-shot group (strictly more than this).
pub const MANY_SHOT_ABOVE: usize = 100;
/// Class-count boundary for the few-shot group (strictly fewer than this).
pub const FEW_SHOT_BELOW: usize = 20;

// Sub-stream ids for the per-purpose RNGs derived from one dataset seed.
const STREAM_MEANS: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_PROBE: u64 = 2;
const STREAM_TEST: u64 = 3;

/// Long-tailed class-count profile plus the expert thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTailSpec {
    pub num_classes: usize,
    pub imbalance_ratio: f64,
    pub max_count: usize,
    /// Per-class training sample counts, non-increasing.
    pub counts: Vec<usize>,
    /// Medium-expert threshold: classes with fewer than `tau_m` samples.
    pub tau_m: usize,
    /// Tail-expert threshold: classes with fewer than `tau_t` samples.
    pub tau_t: usize,
}

impl LongTailSpec {
    /// Build the exponential profile `n_c = round(N_max · IR^(−c/(C−1)))`,
    /// rounded half-up with a floor of one sample per class.
    pub fn new(
        num_classes: usize,
        imbalance_ratio: f64,
        max_count: usize,
        tau_m: usize,
        tau_t: usize,
    ) -> Result<Self> {
        let mut problems = Vec::new();
        if num_classes < 2 {
            problems.push(format!("num_classes must be >= 2, got {num_classes}"));
        }
        if !imbalance_ratio.is_finite() || imbalance_ratio < 1.0 {
            problems.push(format!(
                "imbalance_ratio must be >= 1, got {imbalance_ratio}"
            ));
        }
        if (max_count as f64) < imbalance_ratio {
            problems.push(format!(
                "max_count ({max_count}) must be >= imbalance_ratio ({imbalance_ratio}) \
                 so the tail keeps at least one sample"
            ));
        }
        if tau_t >= tau_m {
            problems.push(format!("tau_t ({tau_t}) must be < tau_m ({tau_m})"));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let denom = (num_classes - 1) as f64;
        let counts: Vec<usize> = (0..num_classes)
            .map(|c| {
                let frac = c as f64 / denom;
                let raw = max_count as f64 * imbalance_ratio.powf(-frac);
                (raw.round() as usize).max(1)
            })
            .collect();
        Ok(LongTailSpec {
            num_classes,
            imbalance_ratio,
            max_count,
            counts,
            tau_m,
            tau_t,
        })
    }

    pub fn total_count(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Many/medium/few partition at the fixed 100/20 count boundaries.
    pub fn shot_split(&self) -> ShotSplit {
        ShotSplit::from_counts(&self.counts)
    }
}

/// Which evaluation group a class belongs to, by training count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShotGroup {
    Many,
    Medium,
    Few,
}

/// Partition of classes into many-shot (>100), medium-shot (20–100) and
/// few-shot (<20) by training count.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotSplit {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
}

impl ShotSplit {
    pub fn from_counts(counts: &[usize]) -> Self {
        let mut many = Vec::new();
        let mut medium = Vec::new();
        let mut few = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            if n > MANY_SHOT_ABOVE {
                many.push(c);
            } else if n < FEW_SHOT_BELOW {
                few.push(c);
            } else {
                medium.push(c);
            }
        }
        ShotSplit { many, medium, few }
    }

    pub fn group_of(&self, class: usize) -> ShotGroup {
        if self.many.contains(&class) {
            ShotGroup::Many
        } else if self.few.contains(&class) {
            ShotGroup::Few
        } else {
            ShotGroup::Medium
        }
    }
}

/// Which split a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Probe,
    Test,
}

/// A dense feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `[len × feature_dim]`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Generator knobs beyond the count profile.
#[derive(Debug, Clone, PartialEq)]
pub struct GenOptions {
    pub feature_dim: usize,
    pub seed: u64,
    pub probe_per_class: usize,
    pub test_per_class: usize,
    /// Distance of each class mean from the origin.
    pub separation: f64,
    /// Isotropic noise scale around each mean.
    pub noise_sigma: f64,
    /// 0 leaves means untouched; 1 collapses each hard pair onto one point.
    pub overlap: f64,
    /// Classes made hard by pulling their means together pairwise.
    pub hard_classes: Vec<usize>,
}

impl GenOptions {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let mut problems = Vec::new();
        if self.feature_dim < 2 {
            problems.push(format!(
                "feature_dim must be >= 2, got {}",
                self.feature_dim
            ));
        }
        if self.probe_per_class < 1 {
            problems.push("probe_per_class must be >= 1".to_string());
        }
        if self.test_per_class < 1 {
            problems.push("test_per_class must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            problems.push(format!("overlap must be in [0,1], got {}", self.overlap));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma <= 0.0 {
            problems.push(format!("noise_sigma must be > 0, got {}", self.noise_sigma));
        }
        if !self.separation.is_finite() || self.separation < 0.0 {
            problems.push(format!("separation must be >= 0, got {}", self.separation));
        }
        for &c in &self.hard_classes {
            if c >= num_classes {
                problems.push(format!(
                    "hard class {c} out of range for {num_classes} classes"
                ));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic class means: seed-dependent unit directions scaled by
/// `separation`, then hard classes pulled pairwise toward shared midpoints.
pub fn class_means(num_classes: usize, opts: &GenOptions) -> Vec<f64> {
    let d = opts.feature_dim;
    let mut rng = stream_rng(opts.seed, STREAM_MEANS);
    let normal = StandardNormal;
    let mut means = vec![0.0; num_classes * d];
    for c in 0..num_classes {
        let row = &mut means[c * d..(c + 1) * d];
        for v in row.iter_mut() {
            *v = normal.sample(&mut rng);
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 {
            for v in row.iter_mut() {
                *v *= opts.separation / norm;
            }
        } else {
            row[c % d] = opts.separation;
        }
    }
    // Pair consecutive hard classes; a lone trailing one moves toward the
    // next class index so any list length is well defined.
    let hard = &opts.hard_classes;
    let original = means.clone();
    let mut i = 0;
    while i < hard.len() {
        if i + 1 < hard.len() {
            let (a, b) = (hard[i], hard[i + 1]);
            for j in 0..d {
                let mid = 0.5 * (original[a * d + j] + original[b * d + j]);
                means[a * d + j] = (1.0 - opts.overlap) * original[a * d + j] + opts.overlap * mid;
                means[b * d + j] = (1.0 - opts.overlap) * original[b * d + j] + opts.overlap * mid;
            }
            i += 2;
        } else {
            let a = hard[i];
            let partner = (a + 1) % num_classes;
            for j in 0..d {
                means[a * d + j] = (1.0 - opts.overlap) * original[a * d + j]
                    + opts.overlap * original[partner * d + j];
            }
            i += 1;
        }
    }
    means
}

fn sample_split(
    counts: &[usize],
    means: &[f64],
    opts: &GenOptions,
    stream: u64,
    split: SplitTag,
) -> Dataset {
    let d = opts.feature_dim;
    let num_classes = counts.len();
    let total: usize = counts.iter().sum();
    let mut rng = stream_rng(opts.seed, stream);
    let normal = StandardNormal;
    let mut features = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for (c, &n) in counts.iter().enumerate() {
        let mean = &means[c * d..(c + 1) * d];
        for _ in 0..n {
            for mj in mean {
                let z: f64 = normal.sample(&mut rng);
                features.push(mj + opts.noise_sigma * z);
            }
            labels.push(c);
        }
    }
    Dataset {
        features,
        labels,
        feature_dim: d,
        num_classes,
        split,
    }
}

/// Draw the long-tailed train split plus balanced probe and test splits.
/// The three splits use disjoint RNG streams of the same seed, so a fixed
/// seed reproduces every sample bit-for-bit.
pub fn generate(spec: &LongTailSpec, opts: &GenOptions) -> Result<(Dataset, Dataset, Dataset)> {
    opts.validate(spec.num_classes)?;
    let means = class_means(spec.num_classes, opts);
    let train = sample_split(&spec.counts, &means, opts, STREAM_TRAIN, SplitTag::Train);
    let probe_counts = vec![opts.probe_per_class; spec.num_classes];
    let probe = sample_split(&probe_counts, &means, opts, STREAM_PROBE, SplitTag::Probe);
    let test_counts = vec![opts.test_per_class; spec.num_classes];
    let test = sample_split(&test_counts, &means, opts, STREAM_TEST, SplitTag::Test);
    Ok((train, probe, test))
}

/// Write `label,f0,...,f{d−1}` rows, LF line endings, full `f64` precision.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("label");
    for j in 0..dataset.feature_dim {
        header.push_str(&format!(",f{j}"));
    }
    writeln!(w, "{header}")?;
    for i in 0..dataset.len() {
        let mut line = dataset.labels[i].to_string();
        for v in dataset.row(i) {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Load a CSV produced by [`write_csv`]. Line numbers in errors are 1-based
/// and count the header line. When `expected_classes` is given, labels must
/// lie in `[0, expected_classes)`; otherwise the class count is inferred as
/// `max(label) + 1`.
pub fn load_csv(path: &Path, expected_classes: Option<usize>) -> Result<Dataset> {
    let display = path.display().to_string();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: display.clone(),
        line,
        message,
    };
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file, expected header".to_string()))?;
    let header = header?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.first() != Some(&"label") || cols.len() < 2 {
        return Err(parse_err(
            1,
            format!("expected header starting with 'label,f0', got {header:?}"),
        ));
    }
    let feature_dim = cols.len() - 1;
    for (j, col) in cols[1..].iter().enumerate() {
        if *col != format!("f{j}") {
            return Err(parse_err(1, format!("expected column f{j}, got {col:?}")));
        }
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut max_label = 0usize;
    for (idx, line) in lines {
        let line_no = idx + 1; // enumerate is 0-based over all lines
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != feature_dim + 1 {
            return Err(parse_err(
                line_no,
                format!("expected {} fields, got {}", feature_dim + 1, fields.len()),
            ));
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(line_no, format!("invalid label {:?}", fields[0])))?;
        if let Some(c) = expected_classes {
            if label >= c {
                return Err(parse_err(
                    line_no,
                    format!("label {label} out of range for {c} classes"),
                ));
            }
        }
        max_label = max_label.max(label);
        for field in &fields[1..] {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line_no, format!("invalid feature {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line_no, format!("non-finite feature {field:?}")));
            }
            features.push(v);
        }
        labels.push(label);
    }
    let num_classes = expected_classes.unwrap_or(if labels.is_empty() { 0 } else { max_label + 1 });
    Ok(Dataset {
        features,
        labels,
        feature_dim,
        num_classes,
        split: SplitTag::Train,
    })
}
