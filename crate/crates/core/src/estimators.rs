//! Point estimators of a target policy's value from logged bandit data.
//!
//! Every estimator is available two ways: as a free function taking the log
//! and policies directly (`ips`, `dm`, `switch_estimate`, ...), and as a
//! method on [`WeightedLog`], which caches policy probabilities and
//! importance weights so that many estimators and thresholds can be run
//! against one log cheaply. The free functions are thin wrappers over the
//! cached path.
//!
//! Averages are accumulated in record order and divided by `n` once, and the
//! per-record sums run over actions in index order. The SWITCH family relies
//! on this: with an empty imputation region SWITCH reproduces IPS exactly, and
//! with an empty importance-weighted region it reproduces DM exactly.

use serde::Serialize;

use crate::domain::{checked_probs, importance_weight, BanditLog, FeatureVector, Policy};
use crate::error::{Error, Result};

/// Predictor r̂(x, a) of the mean reward.
///
/// Estimators never use raw predictions: every value is clipped into
/// `[0, reward_cap(x, a)]` first.
pub trait RewardModel: Send + Sync {
    fn predict(&self, x: &FeatureVector, action: usize) -> f64;

    /// Prediction for the `record`-th entry of the log being evaluated.
    /// Cross-fitted models override this to route records to the fold model
    /// that did not see them.
    fn predict_record(&self, _record: usize, x: &FeatureVector, action: usize) -> f64 {
        self.predict(x, action)
    }

    /// Known bound R_max(x, a) on the mean reward.
    fn reward_cap(&self, _x: &FeatureVector, _action: usize) -> f64 {
        f64::INFINITY
    }
}

impl<M: RewardModel + ?Sized> RewardModel for &M {
    fn predict(&self, x: &FeatureVector, action: usize) -> f64 {
        (**self).predict(x, action)
    }

    fn predict_record(&self, record: usize, x: &FeatureVector, action: usize) -> f64 {
        (**self).predict_record(record, x, action)
    }

    fn reward_cap(&self, x: &FeatureVector, action: usize) -> f64 {
        (**self).reward_cap(x, action)
    }
}

/// r̂ ≡ 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroModel;

impl RewardModel for ZeroModel {
    fn predict(&self, _: &FeatureVector, _: usize) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantModel(pub f64);

impl RewardModel for ConstantModel {
    fn predict(&self, _: &FeatureVector, _: usize) -> f64 {
        self.0
    }
}

/// Table of predictions over finite contexts, indexed like
/// [`crate::domain::TabularPolicy`].
#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel(pub Vec<Vec<f64>>);

impl RewardModel for TabularModel {
    fn predict(&self, x: &FeatureVector, action: usize) -> f64 {
        self.0[crate::domain::context_index(x)][action]
    }
}

/// Wraps a model with a constant reward cap.
#[derive(Debug, Clone)]
pub struct Capped<M> {
    pub model: M,
    pub cap: f64,
}

impl<M: RewardModel> RewardModel for Capped<M> {
    fn predict(&self, x: &FeatureVector, action: usize) -> f64 {
        self.model.predict(x, action)
    }

    fn predict_record(&self, record: usize, x: &FeatureVector, action: usize) -> f64 {
        self.model.predict_record(record, x, action)
    }

    fn reward_cap(&self, _: &FeatureVector, _: usize) -> f64 {
        self.cap
    }
}

/// An estimate with optional tuning diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimateReport {
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub var_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_bound_sq: Option<f64>,
}

impl EstimateReport {
    pub fn value(value: f64) -> Self {
        Self {
            value,
            tau: None,
            var_hat: None,
            bias_bound_sq: None,
        }
    }

    pub fn with_tau(value: f64, tau: f64) -> Self {
        Self {
            tau: Some(tau),
            ..Self::value(value)
        }
    }
}

/// Clipped model predictions for every (record, action) pair of a log,
/// stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    values: Vec<f64>,
    k: usize,
}

impl Predictions {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn zeros(n: usize, k: usize) -> Self {
        Self {
            values: vec![0.0; n * k],
            k,
        }
    }

    pub fn num_actions(&self) -> usize {
        self.k
    }
}

/// A log together with cached target probabilities and importance weights.
pub struct WeightedLog<'a> {
    log: &'a BanditLog,
    k: usize,
    target: Vec<f64>,
    rho_logged: Vec<f64>,
    rho_all: Option<Vec<f64>>,
}

impl<'a> WeightedLog<'a> {
    /// Evaluates the target policy on every record. The logging policy is
    /// needed only by estimators that inspect ρ(x_i, a) for actions other
    /// than the logged one (the SWITCH family and the threshold grid).
    pub fn new(log: &'a BanditLog, target: &dyn Policy, logging: Option<&dyn Policy>) -> Result<Self> {
        let k = log.num_actions();
        if target.num_actions() != k {
            return Err(Error::PolicyArity {
                expected: k,
                got: target.num_actions(),
            });
        }
        let n = log.len();
        let mut target_probs = Vec::with_capacity(n * k);
        let mut rho_logged = Vec::with_capacity(n);
        let mut rho_all = logging.map(|_| Vec::with_capacity(n * k));
        for rec in log.records() {
            let pi = checked_probs(target, &rec.features)?;
            if !(rec.logging_prob > 0.0 && rec.logging_prob <= 1.0) {
                if rec.logging_prob == 0.0 && pi[rec.action] > 0.0 {
                    return Err(Error::AbsoluteContinuity {
                        target_prob: pi[rec.action],
                    });
                }
                return Err(Error::InvalidPropensity(rec.logging_prob));
            }
            rho_logged.push(importance_weight(pi[rec.action], rec.logging_prob)?);
            if let (Some(logging), Some(all)) = (logging, rho_all.as_mut()) {
                if logging.num_actions() != k {
                    return Err(Error::PolicyArity {
                        expected: k,
                        got: logging.num_actions(),
                    });
                }
                let mu = checked_probs(logging, &rec.features)?;
                for (&t, &m) in pi.iter().zip(&mu) {
                    all.push(importance_weight(t, m)?);
                }
            }
            target_probs.extend_from_slice(&pi);
        }
        Ok(Self {
            log,
            k,
            target: target_probs,
            rho_logged,
            rho_all,
        })
    }

    pub fn log(&self) -> &BanditLog {
        self.log
    }

    pub fn len(&self) -> usize {
        self.log.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_actions(&self) -> usize {
        self.k
    }

    /// π(·|x_i).
    pub fn target_row(&self, i: usize) -> &[f64] {
        &self.target[i * self.k..(i + 1) * self.k]
    }

    /// ρ_i for the logged action.
    pub fn rho_logged(&self) -> &[f64] {
        &self.rho_logged
    }

    /// ρ(x_i, ·) over all actions.
    pub fn rho_row(&self, i: usize) -> Result<&[f64]> {
        let all = self.rho_all.as_ref().ok_or(Error::Config(
            "this estimator needs the logging policy to weigh unlogged actions".into(),
        ))?;
        Ok(&all[i * self.k..(i + 1) * self.k])
    }

    fn require_all(&self) -> Result<&[f64]> {
        self.rho_all.as_deref().ok_or(Error::Config(
            "this estimator needs the logging policy to weigh unlogged actions".into(),
        ))
    }

    /// Largest ρ(x_i, a) over every action of every logged context.
    pub fn max_rho_all(&self) -> Result<f64> {
        Ok(self.require_all()?.iter().copied().fold(0.0, f64::max))
    }

    /// Clipped predictions of `model` on every (record, action) pair.
    pub fn predictions(&self, model: &dyn RewardModel) -> Result<Predictions> {
        let mut values = Vec::with_capacity(self.len() * self.k);
        for (i, rec) in self.log.records().iter().enumerate() {
            for a in 0..self.k {
                let raw = model.predict_record(i, &rec.features, a);
                if raw.is_nan() {
                    return Err(Error::NonFinite("reward model prediction"));
                }
                let cap = model.reward_cap(&rec.features, a);
                values.push(raw.clamp(0.0, cap.max(0.0)));
            }
        }
        Ok(Predictions { values, k: self.k })
    }

    /// Table of `f(record index, features, action)` over the log, e.g. the
    /// reward caps R_max(x_i, a). No clipping is applied.
    pub fn action_table(&self, f: impl Fn(usize, &FeatureVector, usize) -> f64) -> Predictions {
        let mut values = Vec::with_capacity(self.len() * self.k);
        for (i, rec) in self.log.records().iter().enumerate() {
            for a in 0..self.k {
                values.push(f(i, &rec.features, a));
            }
        }
        Predictions { values, k: self.k }
    }

    fn mean(&self, values: impl Iterator<Item = f64>) -> f64 {
        let mut sum = 0.0;
        for v in values {
            sum += v;
        }
        sum / self.len() as f64
    }

    fn dm_term(&self, i: usize, pred: &Predictions) -> f64 {
        let mut acc = 0.0;
        for (p, r) in self.target_row(i).iter().zip(pred.row(i)) {
            acc += p * r;
        }
        acc
    }

    pub fn ips(&self) -> f64 {
        let recs = self.log.records();
        self.mean((0..self.len()).map(|i| self.rho_logged[i] * recs[i].reward))
    }

    pub fn dm(&self, pred: &Predictions) -> f64 {
        self.mean((0..self.len()).map(|i| self.dm_term(i, pred)))
    }

    pub fn dr(&self, pred: &Predictions) -> f64 {
        let recs = self.log.records();
        self.mean((0..self.len()).map(|i| {
            let a = recs[i].action;
            self.rho_logged[i] * (recs[i].reward - pred.row(i)[a]) + self.dm_term(i, pred)
        }))
    }

    /// Per-record SWITCH values Y_i(τ): importance-weighted reward when
    /// ρ_i ≤ τ, plus imputed reward over actions with ρ(x_i, a) > τ.
    pub fn switch_values(&self, impute: &Predictions, tau: f64) -> Result<Vec<f64>> {
        check_tau(tau)?;
        self.require_all()?;
        let recs = self.log.records();
        (0..self.len())
            .map(|i| {
                let rho = self.rho_logged[i];
                let kept = if rho <= tau { recs[i].reward * rho } else { 0.0 };
                Ok(kept + self.imputed_above(i, impute, tau)?)
            })
            .collect()
    }

    /// Σ_a r̂(x_i, a) π(a|x_i) 1(ρ(x_i, a) > τ). Actions with π = 0 have ρ = 0
    /// and never enter.
    fn imputed_above(&self, i: usize, impute: &Predictions, tau: f64) -> Result<f64> {
        let mut acc = 0.0;
        for ((&rho, &r), &p) in self.rho_row(i)?.iter().zip(impute.row(i)).zip(self.target_row(i)) {
            if rho > tau {
                acc += r * p;
            }
        }
        Ok(acc)
    }

    /// Per-record SWITCH-DR values: DR restricted to ρ ≤ τ plus imputation
    /// where ρ > τ.
    pub fn switch_dr_values(&self, dr: &Predictions, impute: &Predictions, tau: f64) -> Result<Vec<f64>> {
        check_tau(tau)?;
        let recs = self.log.records();
        (0..self.len())
            .map(|i| {
                let rho = self.rho_logged[i];
                let a = recs[i].action;
                let correction = if rho <= tau {
                    rho * (recs[i].reward - dr.row(i)[a])
                } else {
                    0.0
                };
                let mut below = 0.0;
                for ((&w, &r), &p) in self.rho_row(i)?.iter().zip(dr.row(i)).zip(self.target_row(i)) {
                    if w <= tau {
                        below += p * r;
                    }
                }
                Ok(correction + below + self.imputed_above(i, impute, tau)?)
            })
            .collect()
    }

    pub fn switch(&self, impute: &Predictions, tau: f64) -> Result<f64> {
        Ok(self.mean(self.switch_values(impute, tau)?.into_iter()))
    }

    pub fn switch_dr(&self, dr: &Predictions, impute: &Predictions, tau: f64) -> Result<f64> {
        Ok(self.mean(self.switch_dr_values(dr, impute, tau)?.into_iter()))
    }

    /// Trimmed IPS: SWITCH with r̂ ≡ 0.
    pub fn trim_ips(&self, tau: f64) -> Result<f64> {
        self.switch(&Predictions::zeros(self.len(), self.k), tau)
    }

    /// Weights min(ρ_i, τ), renormalized to sum to one.
    pub fn trun_ips(&self, tau: f64) -> Result<f64> {
        if !(tau > 0.0) || tau.is_nan() {
            return Err(Error::InvalidThreshold(tau));
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (rec, &rho) in self.log.records().iter().zip(&self.rho_logged) {
            let w = rho.min(tau);
            num += w * rec.reward;
            den += w;
        }
        if den == 0.0 {
            return Err(Error::DegenerateNormalizer);
        }
        Ok(num / den)
    }

    /// Exponential grid of `count` thresholds between the smallest positive
    /// and the largest ρ(x_i, a), over all actions in each logged context.
    /// The endpoints are exact; a single-point grid is the largest weight.
    pub fn threshold_grid(&self, count: usize) -> Result<Vec<f64>> {
        if count == 0 {
            return Err(Error::Empty("threshold grid"));
        }
        let all = self.require_all()?;
        let lo = all.iter().copied().filter(|&w| w > 0.0).fold(f64::INFINITY, f64::min);
        if !lo.is_finite() {
            return Err(Error::NoPositiveWeight);
        }
        let hi = all.iter().copied().fold(0.0, f64::max);
        Ok(geometric_grid(lo, hi, count))
    }
}

/// `count` points from `lo` to `hi` in geometric progression.
pub fn geometric_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![hi];
    }
    if lo == hi {
        return vec![lo; count];
    }
    let ratio = hi / lo;
    let last = count - 1;
    (0..count)
        .map(|j| match j {
            0 => lo,
            j if j == last => hi,
            j => lo * ratio.powf(j as f64 / last as f64),
        })
        .collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidThreshold(tau))
    }
}

/// IPS: (1/n) Σ ρ_i r_i.
pub fn ips(log: &BanditLog, target: &dyn Policy) -> Result<EstimateReport> {
    let w = WeightedLog::new(log, target, None)?;
    Ok(EstimateReport::value(w.ips()))
}

/// Direct method: (1/n) Σ_i Σ_a π(a|x_i) r̂(x_i, a).
pub fn dm(log: &BanditLog, target: &dyn Policy, model: &dyn RewardModel) -> Result<EstimateReport> {
    let w = WeightedLog::new(log, target, None)?;
    Ok(EstimateReport::value(w.dm(&w.predictions(model)?)))
}

/// Doubly robust: DM plus the importance-weighted residual on the logged
/// action.
pub fn dr(log: &BanditLog, target: &dyn Policy, model: &dyn RewardModel) -> Result<EstimateReport> {
    let w = WeightedLog::new(log, target, None)?;
    Ok(EstimateReport::value(w.dr(&w.predictions(model)?)))
}

/// SWITCH: IPS on records with ρ_i ≤ τ, model imputation for every action
/// with ρ(x_i, a) > τ.
pub fn switch_estimate(
    log: &BanditLog,
    target: &dyn Policy,
    logging: &dyn Policy,
    impute_model: &dyn RewardModel,
    tau: f64,
) -> Result<EstimateReport> {
    let w = WeightedLog::new(log, target, Some(logging))?;
    let pred = w.predictions(impute_model)?;
    Ok(EstimateReport::with_tau(w.switch(&pred, tau)?, tau))
}

/// SWITCH-DR: DR on the ρ ≤ τ region, imputation with `impute_model` above.
/// The two models may be the same object.
pub fn switch_dr_estimate(
    log: &BanditLog,
    target: &dyn Policy,
    logging: &dyn Policy,
    dr_model: &dyn RewardModel,
    impute_model: &dyn RewardModel,
    tau: f64,
) -> Result<EstimateReport> {
    let w = WeightedLog::new(log, target, Some(logging))?;
    let dr_pred = w.predictions(dr_model)?;
    let imp_pred = w.predictions(impute_model)?;
    Ok(EstimateReport::with_tau(w.switch_dr(&dr_pred, &imp_pred, tau)?, tau))
}

/// Trimmed IPS: drop records with ρ_i > τ.
pub fn trim_ips(log: &BanditLog, target: &dyn Policy, logging: &dyn Policy, tau: f64) -> Result<EstimateReport> {
    let w = WeightedLog::new(log, target, Some(logging))?;
    Ok(EstimateReport::with_tau(w.trim_ips(tau)?, tau))
}

/// Truncated and renormalized IPS: Σ min(ρ_i, τ) r_i / Σ min(ρ_i, τ).
///
/// As τ grows this becomes self-normalized IPS, not plain IPS.
pub fn trun_ips(log: &BanditLog, target: &dyn Policy, tau: f64) -> Result<EstimateReport> {
    let w = WeightedLog::new(log, target, None)?;
    Ok(EstimateReport::with_tau(w.trun_ips(tau)?, tau))
}

/// Candidate thresholds for the SWITCH family; see
/// [`WeightedLog::threshold_grid`].
pub fn threshold_grid(log: &BanditLog, target: &dyn Policy, logging: &dyn Policy, count: usize) -> Result<Vec<f64>> {
    WeightedLog::new(log, target, Some(logging))?.threshold_grid(count)
}

/// Estimator names accepted on the command line and in sweep configs.
pub const ESTIMATOR_NAMES: [&str; 8] = ["ips", "dm", "dr", "switch", "switch-dr", "trim-ips", "trun-ips", "magic"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{context_features, FnPolicy, LogRecord, TabularPolicy};
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    /// Single-context log where the target picks action 0 deterministically;
    /// each record is (action, reward, logging_prob).
    fn log_with(recs: &[(usize, f64, f64)], k: usize) -> BanditLog {
        let records = recs
            .iter()
            .map(|&(a, r, p)| LogRecord::new(context_features(0), a, r, p).unwrap())
            .collect();
        BanditLog::new(records, k).unwrap()
    }

    fn point_mass(k: usize, a: usize) -> impl Policy {
        FnPolicy::new(k, move |_: &FeatureVector| {
            let mut p = vec![0.0; k];
            p[a] = 1.0;
            p
        })
    }

    #[test]
    fn ips_examples() {
        // records (rho 2, r 1) and (rho 0.5, r 0)
        let target = FnPolicy::new(2, |x: &FeatureVector| {
            if x[0] == 0.0 {
                vec![1.0, 0.0]
            } else {
                vec![0.5, 0.5]
            }
        });
        let log = BanditLog::new(
            vec![
                LogRecord::new(context_features(0), 0, 1.0, 0.5).unwrap(),
                LogRecord::new(context_features(1), 0, 0.0, 1.0).unwrap(),
            ],
            2,
        )
        .unwrap();
        let w = WeightedLog::new(&log, &target, None).unwrap();
        assert_eq!(w.rho_logged(), &[2.0, 0.5]);
        assert_eq!(ips(&log, &target).unwrap().value, 1.0);

        let zero = log_with(&[(0, 0.0, 0.5), (1, 0.0, 0.5)], 2);
        assert_eq!(ips(&zero, &target).unwrap().value, 0.0);
    }

    #[test]
    fn ips_on_policy_is_sample_mean() {
        let pol = FnPolicy::new(2, |_: &FeatureVector| vec![0.25, 0.75]);
        let log = log_with(&[(0, 1.0, 0.25), (1, 0.0, 0.75), (1, 1.0, 0.75)], 2);
        assert!(close(ips(&log, &pol).unwrap().value, 2.0 / 3.0));
    }

    #[test]
    fn dm_examples() {
        let target = FnPolicy::new(2, |_: &FeatureVector| vec![0.25, 0.75]);
        let log = log_with(&[(0, 1.0, 0.5)], 2);
        let model = FnModel(|_: &FeatureVector, a: usize| [0.4, 0.8][a]);
        assert!(close(dm(&log, &target, &model).unwrap().value, 0.7));
        assert_eq!(dm(&log, &target, &ZeroModel).unwrap().value, 0.0);

        let det = point_mass(3, 2);
        let log = log_with(&[(0, 1.0, 0.5), (1, 0.0, 0.2), (2, 1.0, 0.3)], 3);
        let model = FnModel(|_: &FeatureVector, a: usize| if a == 2 { 0.7 } else { 0.1 });
        assert!(close(dm(&log, &det, &model).unwrap().value, 0.7));
    }

    struct FnModel<F>(F);

    impl<F: Fn(&FeatureVector, usize) -> f64 + Send + Sync> RewardModel for FnModel<F> {
        fn predict(&self, x: &FeatureVector, a: usize) -> f64 {
            (self.0)(x, a)
        }
    }

    #[test]
    fn dr_examples() {
        let target = point_mass(2, 0);
        let log = log_with(&[(0, 1.0, 0.5)], 2);
        assert_eq!(
            dr(&log, &target, &ConstantModel(1.0)).unwrap().value,
            1.0,
            "rho 2 * (1 - 1) + 1"
        );
        assert_eq!(
            dr(&log, &target, &ZeroModel).unwrap().value,
            ips(&log, &target).unwrap().value
        );
    }

    #[test]
    fn dr_on_policy_exact_model_equals_dm() {
        let pol = FnPolicy::new(2, |_: &FeatureVector| vec![0.5, 0.5]);
        let log = log_with(&[(0, 0.3, 0.5), (1, 0.9, 0.5)], 2);
        let model = FnModel(|_: &FeatureVector, a: usize| [0.3, 0.9][a]);
        assert_eq!(
            dr(&log, &pol, &model).unwrap().value,
            dm(&log, &pol, &model).unwrap().value
        );
    }

    #[test]
    fn switch_single_record_example() {
        let target = point_mass(2, 0);
        let logging = FnPolicy::new(2, |_: &FeatureVector| vec![0.5, 0.5]);
        let log = log_with(&[(0, 1.0, 0.5)], 2);
        let model = ConstantModel(0.3);
        let v = switch_estimate(&log, &target, &logging, &model, 1.0).unwrap();
        assert_eq!(v.value, 0.3);
        assert_eq!(v.tau, Some(1.0));
    }

    #[test]
    fn switch_endpoints_on_small_log() {
        let target = FnPolicy::new(3, |_: &FeatureVector| vec![0.2, 0.0, 0.8]);
        let logging = FnPolicy::new(3, |_: &FeatureVector| vec![0.5, 0.3, 0.2]);
        let log = log_with(&[(0, 1.0, 0.5), (1, 0.0, 0.3), (2, 1.0, 0.2), (2, 0.0, 0.2)], 3);
        let model = FnModel(|_: &FeatureVector, a: usize| [0.1, 0.5, 0.9][a]);
        let s0 = switch_estimate(&log, &target, &logging, &model, 0.0).unwrap().value;
        assert_eq!(s0, dm(&log, &target, &model).unwrap().value);
        let smax = switch_estimate(&log, &target, &logging, &model, 4.0).unwrap().value;
        assert_eq!(smax, ips(&log, &target).unwrap().value);
    }

    #[test]
    fn trim_examples() {
        let target = FnPolicy::new(2, |x: &FeatureVector| {
            if x[0] == 0.0 {
                vec![1.0, 0.0]
            } else {
                vec![0.5, 0.5]
            }
        });
        let logging = UniformPolicy2;
        let log = BanditLog::new(
            vec![
                LogRecord::new(context_features(0), 0, 1.0, 0.5).unwrap(),
                LogRecord::new(context_features(1), 0, 1.0, 1.0).unwrap(),
            ],
            2,
        )
        .unwrap();
        // logging policy disagrees with record 2's propensity here, but trim
        // only uses recorded rho for the kept part and the zero model above
        assert!(close(trim_ips(&log, &target, &logging, 1.0).unwrap().value, 0.25));
        assert_eq!(trim_ips(&log, &target, &logging, 0.0).unwrap().value, 0.0);
        assert_eq!(
            trim_ips(&log, &target, &logging, 2.0).unwrap().value,
            ips(&log, &target).unwrap().value
        );
    }

    struct UniformPolicy2;
    impl Policy for UniformPolicy2 {
        fn num_actions(&self) -> usize {
            2
        }
        fn probs(&self, _: &FeatureVector) -> Vec<f64> {
            vec![0.5, 0.5]
        }
    }

    #[test]
    fn trun_examples() {
        let target = FnPolicy::new(2, |x: &FeatureVector| {
            if x[0] == 0.0 {
                vec![1.0, 0.0]
            } else {
                vec![0.5, 0.5]
            }
        });
        let log = BanditLog::new(
            vec![
                LogRecord::new(context_features(0), 0, 1.0, 0.5).unwrap(),
                LogRecord::new(context_features(1), 0, 0.0, 1.0).unwrap(),
            ],
            2,
        )
        .unwrap();
        assert!(close(trun_ips(&log, &target, 1.0).unwrap().value, 1.0 / 1.5));
        // cap inactive: self-normalized IPS = 2 / 2.5
        assert!(close(trun_ips(&log, &target, 10.0).unwrap().value, 2.0 / 2.5));
        assert!(matches!(trun_ips(&log, &target, 0.0), Err(Error::InvalidThreshold(_))));

        let never = point_mass(2, 1);
        let log = log_with(&[(0, 1.0, 0.5)], 2);
        assert!(matches!(trun_ips(&log, &never, 1.0), Err(Error::DegenerateNormalizer)));
    }

    #[test]
    fn trun_constant_reward() {
        let target = FnPolicy::new(2, |_: &FeatureVector| vec![0.9, 0.1]);
        let log = log_with(&[(0, 0.4, 0.3), (1, 0.4, 0.7), (0, 0.4, 0.3)], 2);
        for tau in [0.1, 0.5, 1.0, 3.0, 100.0] {
            assert!(close(trun_ips(&log, &target, tau).unwrap().value, 0.4));
        }
    }

    #[test]
    fn grid_examples() {
        let g = geometric_grid(1.0, 100.0, 21);
        assert_eq!(g.len(), 21);
        for (j, t) in g.iter().enumerate() {
            assert!((t - 10f64.powf(j as f64 / 10.0)).abs() < 1e-12 * t);
        }
        assert_eq!(g[0], 1.0);
        assert_eq!(g[20], 100.0);
        assert_eq!(geometric_grid(3.0, 3.0, 21), vec![3.0; 21]);
        assert_eq!(geometric_grid(1.0, 4.0, 2), vec![1.0, 4.0]);
    }

    #[test]
    fn grid_uses_smallest_positive_weight() {
        let target = FnPolicy::new(3, |_: &FeatureVector| vec![0.0, 0.2, 0.8]);
        let logging = FnPolicy::new(3, |_: &FeatureVector| vec![0.6, 0.2, 0.2]);
        let log = log_with(&[(0, 1.0, 0.6)], 3);
        let g = threshold_grid(&log, &target, &logging, 3).unwrap();
        assert_eq!(g, vec![1.0, 2.0, 4.0]);
        let none = FnPolicy::new(3, |_: &FeatureVector| vec![1.0, 0.0, 0.0]);
        let zero_logging = FnPolicy::new(3, |_: &FeatureVector| vec![0.0, 0.5, 0.5]);
        let log = log_with(&[(1, 1.0, 0.5)], 3);
        assert!(WeightedLog::new(&log, &none, Some(&zero_logging)).is_err());
    }

    #[test]
    fn needs_logging_policy_for_switch() {
        let target = point_mass(2, 0);
        let log = log_with(&[(0, 1.0, 0.5)], 2);
        let w = WeightedLog::new(&log, &target, None).unwrap();
        let p = w.predictions(&ZeroModel).unwrap();
        assert!(w.switch(&p, 1.0).is_err());
    }

    #[test]
    fn predictions_are_clipped() {
        let target = point_mass(2, 0);
        let log = log_with(&[(0, 1.0, 0.5)], 2);
        let w = WeightedLog::new(&log, &target, None).unwrap();
        let model = Capped {
            model: FnModel(|_: &FeatureVector, a: usize| [1.7, -0.4][a]),
            cap: 1.0,
        };
        assert_eq!(w.predictions(&model).unwrap().row(0), &[1.0, 0.0]);
    }

    // Random logs over a handful of contexts with tabular policies; records
    // carry the exact logging probability of their action.
    fn random_setup() -> impl Strategy<Value = (TabularPolicy, TabularPolicy, TabularModel, TabularModel, BanditLog)> {
        (2usize..5, 2usize..5).prop_flat_map(|(m, k)| {
            let row = proptest::collection::vec(0.0f64..1.0, k);
            let table = proptest::collection::vec(row.clone(), m);
            let sparse = proptest::collection::vec(proptest::collection::vec(prop_oneof![Just(0.0), 0.0f64..1.0], k), m);
            (
                table.clone(),
                sparse,
                table.clone(),
                table,
                proptest::collection::vec((0..m, 0..k, prop_oneof![Just(0.0), Just(1.0), 0.0f64..1.0]), 1..20),
            )
                .prop_map(move |(logging, target, model_a, model_b, draws)| {
                    let norm = |t: Vec<Vec<f64>>, floor: f64| -> Vec<Vec<f64>> {
                        t.into_iter()
                            .map(|r| {
                                let r: Vec<f64> = r.into_iter().map(|v| v + floor).collect();
                                let mut s: f64 = r.iter().sum();
                                if s == 0.0 {
                                    s = 1.0;
                                }
                                let mut out: Vec<f64> = r.iter().map(|v| v / s).collect();
                                if out.iter().all(|&v| v == 0.0) {
                                    out[0] = 1.0;
                                }
                                out
                            })
                            .collect()
                    };
                    let logging = norm(logging, 0.05);
                    let target = norm(target, 0.0);
                    let records = draws
                        .into_iter()
                        .map(|(x, a, r)| LogRecord::new(context_features(x), a, r, logging[x][a]).unwrap())
                        .collect();
                    (
                        TabularPolicy::new(target).unwrap(),
                        TabularPolicy::new(logging).unwrap(),
                        TabularModel(model_a),
                        TabularModel(model_b),
                        BanditLog::new(records, k).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn switch_family_identities((target, logging, ma, mb, log) in random_setup()) {
            let w = WeightedLog::new(&log, &target, Some(&logging)).unwrap();
            let pa = w.predictions(&ma).unwrap();
            let pb = w.predictions(&mb).unwrap();
            let zero = Predictions::zeros(w.len(), w.num_actions());
            let top = w.max_rho_all().unwrap();
            prop_assert_eq!(w.switch(&pa, 0.0).unwrap(), w.dm(&pa));
            prop_assert_eq!(w.switch(&pa, top).unwrap(), w.ips());
            prop_assert_eq!(w.dr(&zero), w.ips());
            prop_assert_eq!(w.switch_dr(&pb, &pa, top).unwrap(), w.dr(&pb));
            prop_assert_eq!(w.switch_dr(&pb, &pa, 0.0).unwrap(), w.dm(&pa));
            for tau in [0.0, 0.5, 1.0, 2.0, top] {
                prop_assert_eq!(w.trim_ips(tau).unwrap(), w.switch(&zero, tau).unwrap());
                prop_assert_eq!(w.switch_dr(&zero, &pa, tau).unwrap(), w.switch(&pa, tau).unwrap());
            }
        }

        #[test]
        fn imputation_skipping_matches_naive_sum((target, logging, ma, _mb, log) in random_setup(), tau in 0.0f64..5.0) {
            let w = WeightedLog::new(&log, &target, Some(&logging)).unwrap();
            let pa = w.predictions(&ma).unwrap();
            let ys = w.switch_values(&pa, tau).unwrap();
            for (i, rec) in log.records().iter().enumerate() {
                let rho = w.rho_logged()[i];
                let mut naive = rec.reward * rho * f64::from(u8::from(rho <= tau));
                let rho_row = w.rho_row(i).unwrap();
                for a in 0..w.num_actions() {
                    naive += pa.row(i)[a] * w.target_row(i)[a] * f64::from(u8::from(rho_row[a] > tau));
                }
                prop_assert!((naive - ys[i]).abs() <= 1e-12);
            }
        }

        #[test]
        fn imputed_set_shrinks_with_tau((target, logging, _ma, _mb, log) in random_setup(), t1 in 0.0f64..5.0, t2 in 0.0f64..5.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let w = WeightedLog::new(&log, &target, Some(&logging)).unwrap();
            for i in 0..w.len() {
                for &rho in w.rho_row(i).unwrap() {
                    prop_assert!(!(rho > hi) || rho > lo);
                }
                let rho = w.rho_logged()[i];
                prop_assert!(!(rho <= lo) || rho <= hi);
            }
        }

        #[test]
        fn estimators_ignore_record_order((target, logging, ma, _mb, log) in random_setup(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut idx: Vec<usize> = (0..log.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled = log.subset(&idx).unwrap();
            let a = WeightedLog::new(&log, &target, Some(&logging)).unwrap();
            let b = WeightedLog::new(&shuffled, &target, Some(&logging)).unwrap();
            let (pa, pb) = (a.predictions(&ma).unwrap(), b.predictions(&ma).unwrap());
            let pairs = [
                (a.ips(), b.ips()),
                (a.dm(&pa), b.dm(&pb)),
                (a.dr(&pa), b.dr(&pb)),
                (a.switch(&pa, 1.0).unwrap(), b.switch(&pb, 1.0).unwrap()),
                (a.switch_dr(&pa, &pa, 1.0).unwrap(), b.switch_dr(&pb, &pb, 1.0).unwrap()),
            ];
            for (x, y) in pairs {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            if let (Ok(x), Ok(y)) = (a.trun_ips(1.0), b.trun_ips(1.0)) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
