//! Logged bandit data, policies and importance weights.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for a probability vector summing to one.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// A context, represented as a finite real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vector"));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// One logged interaction: context, chosen action, observed reward and the
/// logging policy's probability of that action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub features: FeatureVector,
    pub action: usize,
    pub reward: f64,
    pub logging_prob: f64,
}

impl LogRecord {
    /// Checked constructor: the propensity must lie in (0, 1] and the reward
    /// must be finite.
    pub fn new(features: FeatureVector, action: usize, reward: f64, logging_prob: f64) -> Result<Self> {
        if !reward.is_finite() {
            return Err(Error::NonFinite("reward"));
        }
        if !(logging_prob > 0.0 && logging_prob <= 1.0) {
            return Err(Error::InvalidPropensity(logging_prob));
        }
        Ok(Self {
            features,
            action,
            reward,
            logging_prob,
        })
    }
}

/// A nonempty collection of records over a fixed action set.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditLog {
    records: Vec<LogRecord>,
    num_actions: usize,
}

impl BanditLog {
    pub fn new(records: Vec<LogRecord>, num_actions: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("bandit log"));
        }
        if num_actions == 0 {
            return Err(Error::Empty("action set"));
        }
        let dim = records[0].features.dim();
        for r in &records {
            if r.action >= num_actions {
                return Err(Error::ActionOutOfRange {
                    action: r.action,
                    num_actions,
                });
            }
            if r.features.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.features.dim(),
                });
            }
        }
        Ok(Self {
            records,
            num_actions,
        })
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.records[0].features.dim()
    }

    /// Sub-log with the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        Self::new(records, self.num_actions)
    }

    /// Reads the line-delimited format: a header object carrying
    /// `num_actions` and `dim`, then one record object per line.
    pub fn read_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header: LogHeader = loop {
            match lines.next() {
                None => return Err(Error::Empty("log file")),
                Some((i, line)) => {
                    let line = line.map_err(|e| parse_err(i, e))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line).map_err(|e| parse_err(i, e))?;
                }
            }
        };
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| parse_err(i, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LogRecord = serde_json::from_str(&line).map_err(|e| parse_err(i, e))?;
            if rec.features.iter().any(|v| !v.is_finite()) {
                return Err(parse_err(i, "non-finite feature"));
            }
            if rec.features.dim() != header.dim {
                return Err(parse_err(
                    i,
                    format!("expected {} features, got {}", header.dim, rec.features.dim()),
                ));
            }
            records.push(rec);
        }
        Self::new(records, header.num_actions)
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        let header = LogHeader {
            num_actions: self.num_actions,
            dim: self.dim(),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LogHeader {
    num_actions: usize,
    dim: usize,
}

fn parse_err(zero_based_line: usize, e: impl fmt::Display) -> Error {
    Error::Parse {
        line: zero_based_line + 1,
        message: e.to_string(),
    }
}

/// A stochastic policy mapping a context to a distribution over actions.
pub trait Policy: Send + Sync {
    fn num_actions(&self) -> usize;

    /// Action probabilities at `x`. Implementations should return a vector of
    /// length `num_actions()` summing to one; [`checked_probs`] enforces it.
    fn probs(&self, x: &FeatureVector) -> Vec<f64>;
}

impl<P: Policy + ?Sized> Policy for &P {
    fn num_actions(&self) -> usize {
        (**self).num_actions()
    }

    fn probs(&self, x: &FeatureVector) -> Vec<f64> {
        (**self).probs(x)
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn num_actions(&self) -> usize {
        (**self).num_actions()
    }

    fn probs(&self, x: &FeatureVector) -> Vec<f64> {
        (**self).probs(x)
    }
}

/// Checks that `probs` is a valid distribution over `k` actions. Vectors
/// outside the tolerance are rejected, never renormalized.
pub fn check_distribution(probs: &[f64], k: usize) -> Result<()> {
    if probs.len() != k {
        return Err(Error::PolicyArity {
            expected: k,
            got: probs.len(),
        });
    }
    let mut sum = 0.0;
    for &p in probs {
        if !p.is_finite() {
            return Err(Error::NonFinite("policy output"));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidProbability(p));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::ProbabilitySum { sum });
    }
    Ok(())
}

/// Evaluates `policy` at `x` and validates the result.
pub fn checked_probs(policy: &dyn Policy, x: &FeatureVector) -> Result<Vec<f64>> {
    let p = policy.probs(x);
    check_distribution(&p, policy.num_actions())?;
    Ok(p)
}

/// Policy defined by a closure.
pub struct FnPolicy<F> {
    num_actions: usize,
    f: F,
}

impl<F> FnPolicy<F>
where
    F: Fn(&FeatureVector) -> Vec<f64> + Send + Sync,
{
    pub fn new(num_actions: usize, f: F) -> Self {
        Self { num_actions, f }
    }
}

impl<F> Policy for FnPolicy<F>
where
    F: Fn(&FeatureVector) -> Vec<f64> + Send + Sync,
{
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn probs(&self, x: &FeatureVector) -> Vec<f64> {
        (self.f)(x)
    }
}

/// Uniform distribution over all actions.
#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy(pub usize);

impl Policy for UniformPolicy {
    fn num_actions(&self) -> usize {
        self.0
    }

    fn probs(&self, _: &FeatureVector) -> Vec<f64> {
        vec![1.0 / self.0 as f64; self.0]
    }
}

/// Policy over a finite context set, indexed by the first feature.
///
/// Contexts of a finite instance are encoded as the one-element feature
/// vector `[m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    table: Vec<Vec<f64>>,
    num_actions: usize,
}

impl TabularPolicy {
    pub fn new(table: Vec<Vec<f64>>) -> Result<Self> {
        let num_actions = table.first().map(Vec::len).ok_or(Error::Empty("policy table"))?;
        for row in &table {
            check_distribution(row, num_actions)?;
        }
        Ok(Self { table, num_actions })
    }

    pub fn row(&self, context: usize) -> &[f64] {
        &self.table[context]
    }
}

/// Context index encoded in a feature vector by [`context_features`].
pub fn context_index(x: &FeatureVector) -> usize {
    x[0] as usize
}

/// Feature encoding of finite context `m`.
pub fn context_features(m: usize) -> FeatureVector {
    FeatureVector(vec![m as f64])
}

impl Policy for TabularPolicy {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn probs(&self, x: &FeatureVector) -> Vec<f64> {
        self.table[context_index(x)].clone()
    }
}

/// `target_prob / logging_prob`, with 0/0 = 0.
///
/// Fails when the target puts mass on an action the logging policy never
/// takes.
pub fn importance_weight(target_prob: f64, logging_prob: f64) -> Result<f64> {
    for p in [target_prob, logging_prob] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidProbability(p));
        }
    }
    if logging_prob == 0.0 {
        if target_prob == 0.0 {
            return Ok(0.0);
        }
        return Err(Error::AbsoluteContinuity { target_prob });
    }
    Ok(target_prob / logging_prob)
}

/// A problem found by [`validate_log`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// Recorded propensity outside (0, 1].
    Propensity { record: usize, logging_prob: f64 },
    /// Target puts mass where the logging policy puts none.
    AbsoluteContinuity { record: usize, action: usize, target_prob: f64 },
    /// Recorded propensity disagrees with the supplied logging policy.
    PropensityMismatch { record: usize, recorded: f64, policy: f64 },
    /// Reward is NaN or infinite.
    NonFiniteReward { record: usize },
    /// A policy returned an invalid distribution at this record.
    InvalidPolicyOutput { record: usize, message: String },
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub records: usize,
    pub violations: Vec<Violation>,
    /// Extremes of ρ over logged actions, ignoring violating records.
    pub min_rho_observed: Option<f64>,
    pub max_rho_observed: Option<f64>,
    /// Extremes of ρ(x_i, a) over every action in every logged context;
    /// present only when a logging policy is supplied.
    pub min_rho_all: Option<f64>,
    pub max_rho_all: Option<f64>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

fn extend_range(range: &mut (Option<f64>, Option<f64>), v: f64) {
    range.0 = Some(range.0.map_or(v, |m| m.min(v)));
    range.1 = Some(range.1.map_or(v, |m| m.max(v)));
}

/// Scans a log for propensity and absolute-continuity problems and reports
/// importance-weight extremes. When `logging` is given, every action of every
/// logged context is checked against it as well.
pub fn validate_log(log: &BanditLog, target: &dyn Policy, logging: Option<&dyn Policy>) -> ValidationReport {
    let mut report = ValidationReport {
        records: log.len(),
        ..Default::default()
    };
    let mut observed = (None, None);
    let mut all = (None, None);
    for (i, rec) in log.records().iter().enumerate() {
        if !rec.reward.is_finite() {
            report.violations.push(Violation::NonFiniteReward { record: i });
        }
        let pi = match checked_probs(target, &rec.features) {
            Ok(p) => p,
            Err(e) => {
                report.violations.push(Violation::InvalidPolicyOutput {
                    record: i,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let p = rec.logging_prob;
        if !(p > 0.0 && p <= 1.0) {
            report.violations.push(Violation::Propensity {
                record: i,
                logging_prob: p,
            });
            if p == 0.0 && pi[rec.action] > 0.0 {
                report.violations.push(Violation::AbsoluteContinuity {
                    record: i,
                    action: rec.action,
                    target_prob: pi[rec.action],
                });
            }
        } else {
            extend_range(&mut observed, pi[rec.action] / p);
        }
        let Some(logging) = logging else { continue };
        let mu = match checked_probs(logging, &rec.features) {
            Ok(m) => m,
            Err(e) => {
                report.violations.push(Violation::InvalidPolicyOutput {
                    record: i,
                    message: e.to_string(),
                });
                continue;
            }
        };
        if mu[rec.action] != p {
            report.violations.push(Violation::PropensityMismatch {
                record: i,
                recorded: p,
                policy: mu[rec.action],
            });
        }
        for (a, (&t, &m)) in pi.iter().zip(&mu).enumerate() {
            match importance_weight(t, m) {
                Ok(w) => extend_range(&mut all, w),
                Err(_) => report.violations.push(Violation::AbsoluteContinuity {
                    record: i,
                    action: a,
                    target_prob: t,
                }),
            }
        }
    }
    report.min_rho_observed = observed.0;
    report.max_rho_observed = observed.1;
    report.min_rho_all = all.0;
    report.max_rho_all = all.1;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn importance_weight_examples() {
        assert_eq!(importance_weight(0.5, 0.25).unwrap(), 2.0);
        assert_eq!(importance_weight(0.0, 0.0).unwrap(), 0.0);
        assert!(matches!(
            importance_weight(0.3, 0.0),
            Err(Error::AbsoluteContinuity { .. })
        ));
        assert!(importance_weight(1.2, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn importance_weight_round_trip(p in 0.0f64..=1.0, q in 1e-6f64..=1.0) {
            let w = importance_weight(p, q).unwrap();
            prop_assert!((w * q - p).abs() <= 1e-15 * p.max(1.0));
        }
    }

    #[test]
    fn feature_vector_rejects_nan() {
        assert!(FeatureVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(FeatureVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn log_invariants() {
        assert!(BanditLog::new(vec![], 2).is_err());
        let r = LogRecord::new(fv(&[0.0]), 3, 1.0, 0.5).unwrap();
        assert!(matches!(
            BanditLog::new(vec![r], 2),
            Err(Error::ActionOutOfRange { .. })
        ));
        assert!(LogRecord::new(fv(&[0.0]), 0, 1.0, 0.0).is_err());
        assert!(LogRecord::new(fv(&[0.0]), 0, f64::NAN, 0.5).is_err());
    }

    #[test]
    fn distribution_checks() {
        assert!(check_distribution(&[0.5, 0.5], 2).is_ok());
        assert!(check_distribution(&[0.5, 0.5 + 1e-10], 2).is_ok());
        assert!(matches!(
            check_distribution(&[0.5, 0.6], 2),
            Err(Error::ProbabilitySum { .. })
        ));
        assert!(check_distribution(&[1.0], 2).is_err());
        assert!(check_distribution(&[1.5, -0.5], 2).is_err());
    }

    fn two_action_log(probs: &[(usize, f64, f64)]) -> BanditLog {
        let records = probs
            .iter()
            .enumerate()
            .map(|(i, &(a, r, p))| LogRecord {
                features: context_features(i),
                action: a,
                reward: r,
                logging_prob: p,
            })
            .collect();
        BanditLog::new(records, 2).unwrap()
    }

    #[test]
    fn validate_clean_log() {
        let log = two_action_log(&[(0, 1.0, 0.5), (1, 0.0, 0.5)]);
        let target = UniformPolicy(2);
        let logging = UniformPolicy(2);
        let report = validate_log(&log, &target, Some(&logging));
        assert!(report.is_clean(), "{:?}", report.violations);
        assert_eq!(report.max_rho_all, Some(1.0));
    }

    #[test]
    fn validate_flags_zero_propensity() {
        let log = two_action_log(&[(0, 1.0, 0.5), (1, 0.0, 0.0)]);
        let report = validate_log(&log, &UniformPolicy(2), None);
        assert!(report.violations.contains(&Violation::Propensity {
            record: 1,
            logging_prob: 0.0
        }));
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::AbsoluteContinuity { record: 1, .. })));
    }

    #[test]
    fn validate_reports_max_observed_rho() {
        // target always picks action 0; logged at 0.5 -> rho 2, at 1.0 -> rho 1
        let target = FnPolicy::new(2, |_: &FeatureVector| vec![1.0, 0.0]);
        let log = two_action_log(&[(0, 1.0, 0.5), (0, 1.0, 1.0), (1, 0.0, 0.5)]);
        let report = validate_log(&log, &target, None);
        assert!(report.is_clean());
        assert_eq!(report.max_rho_observed, Some(2.0));
        assert_eq!(report.min_rho_observed, Some(0.0));
    }

    #[test]
    fn validate_checks_all_actions_against_logging() {
        let target = UniformPolicy(2);
        let logging = FnPolicy::new(2, |_: &FeatureVector| vec![1.0, 0.0]);
        let log = two_action_log(&[(0, 1.0, 1.0)]);
        let report = validate_log(&log, &target, Some(&logging));
        assert_eq!(
            report.violations,
            vec![Violation::AbsoluteContinuity {
                record: 0,
                action: 1,
                target_prob: 0.5
            }]
        );
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let records = vec![
            LogRecord::new(fv(&[0.1, -2.5e-7]), 1, 1.0, 0.123456789012345).unwrap(),
            LogRecord::new(fv(&[1.0 / 3.0, 7.0]), 0, 0.0, 1.0).unwrap(),
        ];
        let log = BanditLog::new(records, 3).unwrap();
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"num_actions\":3,\"dim\":2}\n"));
        let back = BanditLog::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn jsonl_parse_error_carries_line() {
        let text = "{\"num_actions\":2,\"dim\":1}\n{\"features\":[0.0],\"action\":0,\"reward\":1,\"logging_prob\":0.5}\nnot json\n";
        match BanditLog::read_jsonl(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
