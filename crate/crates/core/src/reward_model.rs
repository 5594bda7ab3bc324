//! Logistic models: per-action binary reward regressors, multinomial
//! policy classifiers, and two-fold cross-fitting for DR.
//!
//! Both modes train by full-batch gradient descent on the summed log loss
//! plus `n·l2/2` times the squared non-intercept weights. A step that would increase
//! the loss is halved until it does not, so the recorded loss trace is
//! nonincreasing. Training is single-threaded and fully deterministic.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{BanditLog, FeatureVector, Policy};
use crate::error::{Error, Result};
use crate::estimators::{RewardModel, WeightedLog};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub l2: f64,
    /// Initial step on the summed loss; halved whenever a step would raise it.
    pub step_size: f64,
    pub iterations: usize,
    /// Standardize features with training-set mean and deviation.
    pub standardize: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            step_size: 0.5,
            iterations: 500,
            standardize: false,
        }
    }
}

const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    /// One binary logistic regressor per action.
    Reward,
    /// A single multinomial (softmax) classifier.
    Policy,
}

/// Affine feature transform fitted on training data.
#[derive(Debug, Clone, PartialEq)]
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(features: &[&[f64]], dim: usize) -> Self {
        let n = features.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for x in features {
            for (m, v) in mean.iter_mut().zip(x.iter()) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for x in features {
            for j in 0..dim {
                scale[j] += (x[j] - mean[j]).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        Self { mean, scale }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Logistic weights: row `a` holds `d` feature weights followed by an
/// intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    mode: ModelMode,
    num_actions: usize,
    dim: usize,
    weights: Vec<f64>,
    config: TrainerConfig,
    standardizer: Option<Standardizer>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn dot_affine(row: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    let mut z = row[d];
    for (w, v) in row[..d].iter().zip(x) {
        z += w * v;
    }
    z
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Mean binary log loss of one action's regressor plus the L2 penalty, and
/// its gradient. `weights` is `d` feature weights then the intercept.
pub fn binary_objective(xs: &[&[f64]], ys: &[f64], weights: &[f64], l2: f64) -> (f64, Vec<f64>) {
    let d = weights.len() - 1;
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; d + 1];
    for (x, &y) in xs.iter().zip(ys) {
        let z = dot_affine(weights, x);
        loss += softplus(z) - y * z;
        let r = sigmoid(z) - y;
        for j in 0..d {
            grad[j] += r * x[j];
        }
        grad[d] += r;
    }
    loss /= n;
    for g in &mut grad {
        *g /= n;
    }
    for j in 0..d {
        loss += 0.5 * l2 * weights[j] * weights[j];
        grad[j] += l2 * weights[j];
    }
    (loss, grad)
}

/// Mean softmax cross-entropy plus the L2 penalty, and its gradient, for a
/// row-major `k × (d+1)` weight matrix.
pub fn softmax_objective(xs: &[&[f64]], labels: &[usize], k: usize, weights: &[f64], l2: f64) -> (f64, Vec<f64>) {
    let stride = weights.len() / k;
    let d = stride - 1;
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; weights.len()];
    let mut z = vec![0.0; k];
    for (x, &y) in xs.iter().zip(labels) {
        for c in 0..k {
            z[c] = dot_affine(&weights[c * stride..(c + 1) * stride], x);
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - z[y];
        for c in 0..k {
            let r = (z[c] - lse).exp() - if c == y { 1.0 } else { 0.0 };
            let row = &mut grad[c * stride..(c + 1) * stride];
            for j in 0..d {
                row[j] += r * x[j];
            }
            row[d] += r;
        }
    }
    loss /= n;
    for g in &mut grad {
        *g /= n;
    }
    for c in 0..k {
        for j in 0..d {
            let w = weights[c * stride + j];
            loss += 0.5 * l2 * w * w;
            grad[c * stride + j] += l2 * w;
        }
    }
    (loss, grad)
}

/// Gradient descent on `n` times the mean objective (the summed loss), with
/// step halving on loss increase. Returns the final weights and the mean
/// loss at the start and after each accepted step.
fn descend(
    mut w: Vec<f64>,
    n: usize,
    config: &TrainerConfig,
    objective: impl Fn(&[f64]) -> (f64, Vec<f64>),
) -> (Vec<f64>, Vec<f64>) {
    let mut step = config.step_size * n as f64;
    let (mut loss, mut grad) = objective(&w);
    let mut trace = vec![loss];
    'outer: for _ in 0..config.iterations {
        for _ in 0..=MAX_HALVINGS {
            let candidate: Vec<f64> = w.iter().zip(&grad).map(|(wi, g)| wi - step * g).collect();
            let (cand_loss, cand_grad) = objective(&candidate);
            if cand_loss <= loss {
                w = candidate;
                loss = cand_loss;
                grad = cand_grad;
                trace.push(loss);
                continue 'outer;
            }
            step *= 0.5;
        }
        break;
    }
    (w, trace)
}

impl LogisticModel {
    pub fn mode(&self) -> ModelMode {
        self.mode
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    fn row(&self, a: usize) -> &[f64] {
        let stride = self.dim + 1;
        &self.weights[a * stride..(a + 1) * stride]
    }

    fn transformed<'x>(&self, x: &'x [f64]) -> std::borrow::Cow<'x, [f64]> {
        match &self.standardizer {
            Some(s) => std::borrow::Cow::Owned(s.apply(x)),
            None => std::borrow::Cow::Borrowed(x),
        }
    }

    /// Raw reward-mode prediction sigmoid(w_a·x + b_a).
    pub fn reward_probability(&self, x: &[f64], action: usize) -> f64 {
        sigmoid(dot_affine(self.row(action), &self.transformed(x)))
    }

    /// Policy-mode class probabilities.
    pub fn class_probabilities(&self, x: &[f64]) -> Vec<f64> {
        let x = self.transformed(x);
        let mut z: Vec<f64> = (0..self.num_actions).map(|c| dot_affine(self.row(c), &x)).collect();
        softmax_in_place(&mut z);
        z
    }

    /// Most probable class; ties go to the smallest index.
    pub fn argmax(&self, x: &[f64]) -> usize {
        let x = self.transformed(x);
        let mut best = (f64::NEG_INFINITY, 0);
        for c in 0..self.num_actions {
            let z = dot_affine(self.row(c), &x);
            if z > best.0 {
                best = (z, c);
            }
        }
        best.1
    }

    /// Plain-text form: header lines, then one weight row per action with 17
    /// significant digits so that loading reproduces the weights exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            ModelMode::Reward => "reward",
            ModelMode::Policy => "policy",
        };
        let c = &self.config;
        writeln!(s, "ope-logistic-model v1").unwrap();
        writeln!(s, "mode {mode}").unwrap();
        writeln!(s, "num_actions {}", self.num_actions).unwrap();
        writeln!(s, "dim {}", self.dim).unwrap();
        writeln!(
            s,
            "config l2={:.16e} step_size={:.16e} iterations={} standardize={}",
            c.l2, c.step_size, c.iterations, c.standardize
        )
        .unwrap();
        match &self.standardizer {
            Some(st) => {
                writeln!(s, "mean {}", fmt_row(&st.mean)).unwrap();
                writeln!(s, "scale {}", fmt_row(&st.scale)).unwrap();
            }
            None => writeln!(s, "standardizer none").unwrap(),
        }
        writeln!(s, "weights").unwrap();
        for a in 0..self.num_actions {
            writeln!(s, "{}", fmt_row(self.row(a))).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut next = |what: &str| -> Result<(usize, &str)> {
            lines.next().map(|(i, l)| (i + 1, l.trim())).ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("unexpected end of model file, wanted {what}"),
            })
        };
        let bad = |line: usize, message: String| Error::Parse { line, message };
        let (ln, magic) = next("header")?;
        if magic != "ope-logistic-model v1" {
            return Err(bad(ln, format!("unknown header {magic:?}")));
        }
        let field = |(ln, line): (usize, &str), key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_owned)
                .ok_or_else(|| bad(ln, format!("expected `{key} ...`")))
        };
        let l = next("mode")?;
        let mode = match field(l, "mode")?.as_str() {
            "reward" => ModelMode::Reward,
            "policy" => ModelMode::Policy,
            other => return Err(bad(l.0, format!("unknown mode {other:?}"))),
        };
        let l = next("num_actions")?;
        let num_actions: usize = field(l, "num_actions")?.parse().map_err(|e| bad(l.0, format!("{e}")))?;
        let l = next("dim")?;
        let dim: usize = field(l, "dim")?.parse().map_err(|e| bad(l.0, format!("{e}")))?;
        let l = next("config")?;
        let mut config = TrainerConfig::default();
        for kv in field(l, "config")?.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(l.0, format!("bad config entry {kv:?}")))?;
            let perr = |e: &dyn std::fmt::Display| bad(l.0, format!("{k}: {e}"));
            match k {
                "l2" => config.l2 = v.parse().map_err(|e| perr(&e))?,
                "step_size" => config.step_size = v.parse().map_err(|e| perr(&e))?,
                "iterations" => config.iterations = v.parse().map_err(|e| perr(&e))?,
                "standardize" => config.standardize = v.parse().map_err(|e| perr(&e))?,
                _ => return Err(bad(l.0, format!("unknown config key {k:?}"))),
            }
        }
        let l = next("standardizer")?;
        let standardizer = if l.1 == "standardizer none" {
            None
        } else {
            let mean = parse_row(l.0, &field(l, "mean")?, dim)?;
            let l2 = next("scale")?;
            let scale = parse_row(l2.0, &field(l2, "scale")?, dim)?;
            Some(Standardizer { mean, scale })
        };
        let l = next("weights")?;
        if l.1 != "weights" {
            return Err(bad(l.0, "expected `weights`".into()));
        }
        let mut weights = Vec::with_capacity(num_actions * (dim + 1));
        for _ in 0..num_actions {
            let (ln, line) = next("weight row")?;
            weights.extend(parse_row(ln, line, dim + 1)?);
        }
        Ok(Self {
            mode,
            num_actions,
            dim,
            weights,
            config,
            standardizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn fmt_row(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(" ")
}

fn parse_row(line: usize, text: &str, expected: usize) -> Result<Vec<f64>> {
    let row = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
    if row.len() != expected || row.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parse {
            line,
            message: format!("expected {expected} finite values, got {}", row.len()),
        });
    }
    Ok(row)
}

/// Fits one binary logistic regressor per action on the records with that
/// action. Actions without records keep zero weights and predict 0.5.
pub fn train_reward_model(log: &BanditLog, config: &TrainerConfig) -> Result<LogisticModel> {
    train_reward_model_traced(log, config).map(|(m, _)| m)
}

/// As [`train_reward_model`], also returning each action's loss trace.
pub fn train_reward_model_traced(log: &BanditLog, config: &TrainerConfig) -> Result<(LogisticModel, Vec<Vec<f64>>)> {
    for rec in log.records() {
        if rec.reward != 0.0 && rec.reward != 1.0 {
            return Err(Error::NonBinaryReward(rec.reward));
        }
    }
    let k = log.num_actions();
    let dim = log.dim();
    let raw: Vec<&[f64]> = log.records().iter().map(|r| r.features.as_slice()).collect();
    let standardizer = config.standardize.then(|| Standardizer::fit(&raw, dim));
    let owned: Option<Vec<Vec<f64>>> = standardizer.as_ref().map(|s| raw.iter().map(|x| s.apply(x)).collect());
    let xs: Vec<&[f64]> = match &owned {
        Some(v) => v.iter().map(Vec::as_slice).collect(),
        None => raw,
    };
    let mut weights = Vec::with_capacity(k * (dim + 1));
    let mut traces = Vec::with_capacity(k);
    for a in 0..k {
        let (ax, ay): (Vec<&[f64]>, Vec<f64>) = log
            .records()
            .iter()
            .zip(&xs)
            .filter(|(r, _)| r.action == a)
            .map(|(r, x)| (*x, r.reward))
            .unzip();
        if ax.is_empty() {
            weights.extend(std::iter::repeat_n(0.0, dim + 1));
            traces.push(Vec::new());
            continue;
        }
        let (w, trace) = descend(vec![0.0; dim + 1], ax.len(), config, |w| binary_objective(&ax, &ay, w, config.l2));
        weights.extend(w);
        traces.push(trace);
    }
    Ok((
        LogisticModel {
            mode: ModelMode::Reward,
            num_actions: k,
            dim,
            weights,
            config: *config,
            standardizer,
        },
        traces,
    ))
}

/// Fits a multinomial softmax classifier.
pub fn train_policy_model(
    features: &[FeatureVector],
    labels: &[usize],
    num_classes: usize,
    config: &TrainerConfig,
) -> Result<LogisticModel> {
    train_policy_model_traced(features, labels, num_classes, config).map(|(m, _)| m)
}

pub fn train_policy_model_traced(
    features: &[FeatureVector],
    labels: &[usize],
    num_classes: usize,
    config: &TrainerConfig,
) -> Result<(LogisticModel, Vec<f64>)> {
    if features.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            got: labels.len(),
        });
    }
    if num_classes == 0 {
        return Err(Error::Empty("class set"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::ActionOutOfRange {
            action: bad,
            num_actions: num_classes,
        });
    }
    let dim = features[0].dim();
    if let Some(f) = features.iter().find(|f| f.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: f.dim(),
        });
    }
    let raw: Vec<&[f64]> = features.iter().map(FeatureVector::as_slice).collect();
    let standardizer = config.standardize.then(|| Standardizer::fit(&raw, dim));
    let owned: Option<Vec<Vec<f64>>> = standardizer.as_ref().map(|s| raw.iter().map(|x| s.apply(x)).collect());
    let xs: Vec<&[f64]> = match &owned {
        Some(v) => v.iter().map(Vec::as_slice).collect(),
        None => raw,
    };
    let (weights, trace) = descend(vec![0.0; num_classes * (dim + 1)], xs.len(), config, |w| {
        softmax_objective(&xs, labels, num_classes, w, config.l2)
    });
    Ok((
        LogisticModel {
            mode: ModelMode::Policy,
            num_actions: num_classes,
            dim,
            weights,
            config: *config,
            standardizer,
        },
        trace,
    ))
}

/// Reward-mode prediction clipped to `[0, cap]`.
pub fn predict_reward(model: &LogisticModel, x: &FeatureVector, action: usize, cap: f64) -> f64 {
    model.reward_probability(x, action).clamp(0.0, cap.max(0.0))
}

impl RewardModel for LogisticModel {
    fn predict(&self, x: &FeatureVector, action: usize) -> f64 {
        self.reward_probability(x, action)
    }

    fn reward_cap(&self, _: &FeatureVector, _: usize) -> f64 {
        1.0
    }
}

/// Softmax probabilities of a policy-mode model.
#[derive(Debug, Clone)]
pub struct SoftmaxPolicy(pub LogisticModel);

impl Policy for SoftmaxPolicy {
    fn num_actions(&self) -> usize {
        self.0.num_actions
    }

    fn probs(&self, x: &FeatureVector) -> Vec<f64> {
        self.0.class_probabilities(x)
    }
}

/// Point mass on the most probable class of a policy-mode model.
#[derive(Debug, Clone)]
pub struct ArgmaxPolicy(pub LogisticModel);

impl Policy for ArgmaxPolicy {
    fn num_actions(&self) -> usize {
        self.0.num_actions
    }

    fn probs(&self, x: &FeatureVector) -> Vec<f64> {
        let mut p = vec![0.0; self.0.num_actions];
        p[self.0.argmax(x)] = 1.0;
        p
    }
}

/// Two reward models, each trained on one half of a log.
#[derive(Debug, Clone)]
pub struct CrossFitPair {
    /// Fold of each record, 0 or 1.
    pub fold_assignment: Vec<u8>,
    /// `models[f]` was trained on fold `1 - f` and evaluates fold `f`.
    pub models: [LogisticModel; 2],
}

/// Splits the log into two folds by a seeded permutation (fold sizes differ
/// by at most one) and trains a model on each.
pub fn cross_fit(log: &BanditLog, config: &TrainerConfig, seed: u64) -> Result<CrossFitPair> {
    let n = log.len();
    if n < 2 {
        return Err(Error::TooFewRecords { needed: 2, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_assignment = vec![1u8; n];
    for &i in &order[..n.div_ceil(2)] {
        fold_assignment[i] = 0;
    }
    let fold = |f: u8| -> Vec<usize> { (0..n).filter(|&i| fold_assignment[i] == f).collect() };
    let model_0 = train_reward_model(&log.subset(&fold(1))?, config)?;
    let model_1 = train_reward_model(&log.subset(&fold(0))?, config)?;
    Ok(CrossFitPair {
        fold_assignment,
        models: [model_0, model_1],
    })
}

impl CrossFitPair {
    pub fn fold_indices(&self, fold: u8) -> Vec<usize> {
        (0..self.fold_assignment.len())
            .filter(|&i| self.fold_assignment[i] == fold)
            .collect()
    }

    /// Reward model that answers record `i` of the fitted log with the model
    /// not trained on it. Off-log queries average the two models.
    pub fn routed(&self) -> RoutedModel<'_> {
        RoutedModel { pair: self }
    }

    /// DR estimated separately on each fold with that fold's held-out model,
    /// then averaged.
    pub fn dr_estimate(&self, log: &BanditLog, target: &dyn Policy) -> Result<f64> {
        let mut total = 0.0;
        for f in 0..2u8 {
            let sub = log.subset(&self.fold_indices(f))?;
            let w = WeightedLog::new(&sub, target, None)?;
            total += w.dr(&w.predictions(&self.models[f as usize])?);
        }
        Ok(total / 2.0)
    }
}

pub struct RoutedModel<'a> {
    pair: &'a CrossFitPair,
}

impl RewardModel for RoutedModel<'_> {
    fn predict(&self, x: &FeatureVector, action: usize) -> f64 {
        0.5 * (self.pair.models[0].predict(x, action) + self.pair.models[1].predict(x, action))
    }

    fn predict_record(&self, record: usize, x: &FeatureVector, action: usize) -> f64 {
        let f = self.pair.fold_assignment[record] as usize;
        self.pair.models[f].predict(x, action)
    }

    fn reward_cap(&self, _: &FeatureVector, _: usize) -> f64 {
        1.0
    }
}
