//! Multiclass-to-bandit simulation: datasets, policy construction, logging
//! and exact ground truth.
//!
//! A multiclass dataset becomes a contextual bandit by treating labels as
//! actions. The context population is the uniform distribution over rows, so
//! policy values are exact finite sums.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{checked_probs, BanditLog, FeatureVector, LogRecord, Policy};
use crate::error::{Error, Result};
use crate::reward_model::{train_policy_model, ArgmaxPolicy, SoftmaxPolicy, TrainerConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct MulticlassDataset {
    name: String,
    features: Vec<FeatureVector>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl MulticlassDataset {
    /// Checks consistent dimensions and that the labels are exactly
    /// `0..K` for some `K`.
    pub fn new(name: impl Into<String>, features: Vec<FeatureVector>, labels: Vec<usize>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if features.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.len(),
                got: labels.len(),
            });
        }
        let dim = features[0].dim();
        if let Some(f) = features.iter().find(|f| f.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: f.dim(),
            });
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; num_classes];
        for &y in &labels {
            seen[y] = true;
        }
        let missing: Vec<usize> = (0..num_classes).filter(|&c| !seen[c]).collect();
        if !missing.is_empty() {
            return Err(Error::LabelRange(format!(
                "largest label is {} but classes {missing:?} never occur",
                num_classes - 1
            )));
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            num_classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> &[FeatureVector] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].dim()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Reads `f0,…,f{d-1},label` CSV. Line numbers in errors count the
    /// header as line 1.
    pub fn read_csv(name: impl Into<String>, reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers().map_err(|e| csv_err(1, e))?.clone();
        if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
            return Err(Error::Empty("dataset file"));
        }
        let d = header.len() - 1;
        for (j, h) in header.iter().enumerate() {
            let want = if j == d { "label".to_string() } else { format!("f{j}") };
            if h.trim() != want {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("column {j} is {h:?}, expected {want:?}"),
                });
            }
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(|e| csv_err(0, e))?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            let err = |message: String| Error::Parse { line, message };
            if row.len() != d + 1 {
                return Err(err(format!("expected {} fields, got {}", d + 1, row.len())));
            }
            let mut x = Vec::with_capacity(d);
            for j in 0..d {
                let v: f64 = row[j].trim().parse().map_err(|e| err(format!("f{j}: {e}")))?;
                if !v.is_finite() {
                    return Err(err(format!("f{j} is not finite")));
                }
                x.push(v);
            }
            let y: usize = row[d].trim().parse().map_err(|e| err(format!("label: {e}")))?;
            features.push(FeatureVector::new(x)?);
            labels.push(y);
        }
        if labels.is_empty() {
            return Err(Error::Empty("dataset file"));
        }
        Self::new(name, features, labels)
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let d = self.dim();
        let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(|e| csv_err(0, e))?;
        for (x, y) in self.features.iter().zip(&self.labels) {
            let mut row: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
            row.push(y.to_string());
            w.write_record(&row).map_err(|e| csv_err(0, e))?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
        Self::read_csv(name, std::io::BufReader::new(file))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn csv_err(fallback_line: usize, e: csv::Error) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io("<csv>", source),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<MulticlassDataset> {
    MulticlassDataset::load_csv(path)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `k` unit vectors in `R^d`: orthonormal when `k ≤ d`, otherwise the most
/// spread of 64 random draws.
fn class_directions(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if k <= d {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
        while basis.len() < k {
            let mut v = gaussian_vec(rng, d);
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
            if v.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
                basis.push(unit(v));
            }
        }
        return basis;
    }
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for _ in 0..64 {
        let dirs: Vec<Vec<f64>> = (0..k).map(|_| unit(gaussian_vec(rng, d))).collect();
        let mut min = f64::INFINITY;
        for i in 0..k {
            for j in i + 1..k {
                min = min.min(dist(&dirs[i], &dirs[j]));
            }
        }
        if best.as_ref().is_none_or(|(m, _)| min > *m) {
            best = Some((min, dirs));
        }
    }
    best.map(|(_, d)| d).expect("64 candidate sets")
}

/// Gaussian clusters with identity covariance around class means of norm
/// `separation`. Rows are shuffled.
pub fn synth_dataset(k: usize, d: usize, per_class: usize, separation: f64, seed: u64) -> Result<MulticlassDataset> {
    if k < 2 || d < 1 || per_class < 1 {
        return Err(Error::Domain(format!(
            "synthetic dataset needs K ≥ 2, d ≥ 1 and per_class ≥ 1 (got K={k}, d={d}, per_class={per_class})"
        )));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::Domain(format!("separation must be finite and ≥ 0, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = class_directions(k, d, &mut rng);
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(k * per_class);
    for (c, dir) in dirs.iter().enumerate() {
        for _ in 0..per_class {
            let x = gaussian_vec(&mut rng, d)
                .into_iter()
                .zip(dir)
                .map(|(z, m)| z + separation * m)
                .collect();
            rows.push((x, c));
        }
    }
    rows.shuffle(&mut rng);
    let (features, labels): (Vec<_>, Vec<_>) = rows
        .into_iter()
        .map(|(x, y)| (FeatureVector::new(x).expect("finite draws"), y))
        .unzip();
    MulticlassDataset::new(format!("synth-k{k}-d{d}"), features, labels)
}

/// Parameters of one generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub name: String,
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn generate(&self) -> Result<MulticlassDataset> {
        Ok(synth_dataset(self.num_classes, self.dim, self.per_class, self.separation, self.seed)?.with_name(&self.name))
    }
}

/// The ten synthetic stand-ins used by the experiment suite.
pub fn shipped_synth_specs() -> Vec<SynthSpec> {
    let table: [(usize, usize, usize, f64); 10] = [
        (2, 2, 400, 1.5),
        (3, 4, 300, 2.0),
        (4, 6, 250, 2.5),
        (5, 8, 200, 2.5),
        (6, 10, 180, 3.0),
        (7, 12, 150, 3.0),
        (8, 14, 140, 3.5),
        (9, 16, 120, 3.5),
        (10, 20, 110, 4.0),
        (10, 3, 140, 3.0),
    ];
    table
        .iter()
        .enumerate()
        .map(|(i, &(k, d, per_class, separation))| SynthSpec {
            name: format!("synth-{:02}", i + 1),
            num_classes: k,
            dim: d,
            per_class,
            separation,
            seed: 0x5EED_0000 + i as u64,
        })
        .collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Per-row inclusion probabilities of the covariate-shift thinning for a
/// given direction draw.
fn shift_inclusion(data: &MulticlassDataset, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = data.dim();
    let n = data.len() as f64;
    let w = unit(gaussian_vec(rng, d));
    let mut mean = vec![0.0; d];
    for x in data.features() {
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let proj: Vec<f64> = data
        .features()
        .iter()
        .map(|x| x.iter().zip(&mean).zip(&w).map(|((v, m), wi)| (v - m) * wi).sum())
        .collect();
    let var = proj.iter().map(|p| p * p).sum::<f64>() / n;
    let s = if var > 0.0 { var.sqrt() } else { 1.0 };
    proj.iter().map(|p| sigmoid(2.0 * p / s)).collect()
}

/// Thins the rows along a random direction so that the kept sample has a
/// shifted feature distribution. Every class keeps at least one row.
pub fn covariate_shift_subsample(data: &MulticlassDataset, seed: u64) -> Result<MulticlassDataset> {
    if data.len() < 10 {
        return Err(Error::TooFewRecords {
            needed: 10,
            got: data.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probs = shift_inclusion(data, &mut rng);
    let mut keep: Vec<bool> = probs.iter().map(|&p| rng.random::<f64>() < p).collect();
    for c in 0..data.num_classes() {
        let rows: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
        if !rows.iter().any(|&i| keep[i]) {
            keep[rows[rng.random_range(0..rows.len())]] = true;
        }
    }
    let (features, labels): (Vec<_>, Vec<_>) = (0..data.len())
        .filter(|&i| keep[i])
        .map(|i| (data.features[i].clone(), data.labels[i]))
        .unzip();
    MulticlassDataset::new(format!("{}-shifted", data.name), features, labels)
}

/// Target: argmax of a softmax classifier fit on all rows. Logging: the
/// softmax probabilities of a classifier fit on a covariate-shifted
/// subsample.
pub fn make_policies(
    data: &MulticlassDataset,
    config: &TrainerConfig,
    seed: u64,
) -> Result<(ArgmaxPolicy, SoftmaxPolicy)> {
    let k = data.num_classes();
    let target = train_policy_model(data.features(), data.labels(), k, config)?;
    let shifted = covariate_shift_subsample(data, seed)?;
    let logging = train_policy_model(shifted.features(), shifted.labels(), k, config)?;
    Ok((ArgmaxPolicy(target), SoftmaxPolicy(logging)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardChannel {
    /// r = 1(a = label).
    Deterministic,
    /// The deterministic reward with probability 1/2, otherwise a fair coin.
    #[default]
    Noisy,
}

impl RewardChannel {
    pub fn name(self) -> &'static str {
        match self {
            RewardChannel::Deterministic => "deterministic",
            RewardChannel::Noisy => "noisy",
        }
    }

    /// P(r = 1) for a correct or incorrect action.
    pub fn mean_reward(self, correct: bool) -> f64 {
        let det = if correct { 1.0 } else { 0.0 };
        match self {
            RewardChannel::Deterministic => det,
            RewardChannel::Noisy => 0.5 * det + 0.25,
        }
    }

    pub fn draw(self, correct: bool, rng: &mut impl Rng) -> f64 {
        let det = if correct { 1.0 } else { 0.0 };
        match self {
            RewardChannel::Deterministic => det,
            RewardChannel::Noisy => {
                if rng.random::<bool>() {
                    det
                } else if rng.random::<bool>() {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for RewardChannel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(RewardChannel::Deterministic),
            "noisy" => Ok(RewardChannel::Noisy),
            other => Err(Error::Config(format!("unknown reward channel {other:?}"))),
        }
    }
}

/// Draws an index from `probs`. Zero-probability entries are never chosen.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Bootstraps `n` rows, logs an action from `logging` and a reward from
/// `channel` for each.
pub fn simulate_log(
    data: &MulticlassDataset,
    logging: &dyn Policy,
    channel: RewardChannel,
    n: usize,
    seed: u64,
) -> Result<BanditLog> {
    if n == 0 {
        return Err(Error::Empty("simulated log"));
    }
    if logging.num_actions() != data.num_classes() {
        return Err(Error::PolicyArity {
            expected: data.num_classes(),
            got: logging.num_actions(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let row = rng.random_range(0..data.len());
        let x = &data.features[row];
        let probs = checked_probs(logging, x)?;
        let a = sample_index(&probs, &mut rng);
        let r = channel.draw(a == data.labels[row], &mut rng);
        records.push(LogRecord::new(x.clone(), a, r, probs[a])?);
    }
    BanditLog::new(records, data.num_classes())
}

/// Exact value of `target` under the uniform distribution over rows.
pub fn ground_truth_value(data: &MulticlassDataset, target: &dyn Policy, channel: RewardChannel) -> Result<f64> {
    let mut total = 0.0;
    for (x, &y) in data.features.iter().zip(&data.labels) {
        let p = checked_probs(target, x)?;
        total += p[y];
    }
    let v_det = total / data.len() as f64;
    Ok(match channel {
        RewardChannel::Deterministic => v_det,
        RewardChannel::Noisy => 0.5 * v_det + 0.25,
    })
}

/// Bootstrap sizes 100, 200, 500, 1000, 2000, … below `n`, then `n`.
pub fn size_schedule(n: usize) -> Vec<usize> {
    let mut sizes = Vec::new();
    let mut decade = 100;
    'outer: loop {
        for m in [1, 2, 5] {
            let s = m * decade;
            if s >= n {
                break 'outer;
            }
            sizes.push(s);
        }
        decade *= 10;
    }
    sizes.push(n);
    sizes
}
