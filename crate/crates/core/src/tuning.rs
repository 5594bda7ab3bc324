//! Data-driven choice of the SWITCH threshold, and a simplified MAGIC
//! combiner.
//!
//! For each candidate τ the selector estimates the variance of the SWITCH
//! estimate from the spread of its per-record values,
//!
//! ```text
//! Var̂_τ = (1/n²) Σ_i (Y_i(τ) − Ȳ(τ))²
//! ```
//!
//! and bounds its squared bias by assuming the reward model is as wrong as
//! possible wherever it is used,
//!
//! ```text
//! Biaŝ²_τ = [ (1/n) Σ_i Σ_a R_max(x_i, a) π(a|x_i) 1(ρ(x_i, a) > τ) ]²
//! ```
//!
//! then returns the τ minimizing the sum. The bias bound is conservative, so
//! the selector only imputes where the importance-weighted variance would be
//! even larger.

use serde::Serialize;

use crate::domain::{BanditLog, FeatureVector, LogRecord, Policy};
use crate::error::{Error, Result};
use crate::estimators::{EstimateReport, Predictions, RewardModel, WeightedLog};

/// Per-τ diagnostics of a threshold selection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuningTrace {
    pub taus: Vec<f64>,
    pub var_hats: Vec<f64>,
    pub bias_bounds_sq: Vec<f64>,
    pub objective: Vec<f64>,
    pub chosen_index: usize,
}

impl TuningTrace {
    pub fn chosen_tau(&self) -> f64 {
        self.taus[self.chosen_index]
    }

    pub fn chosen_objective(&self) -> f64 {
        self.objective[self.chosen_index]
    }

    /// Builds a trace from per-τ variance and squared-bias values, picking
    /// the first (smallest-τ) minimizer of their sum.
    pub fn from_parts(taus: Vec<f64>, var_hats: Vec<f64>, bias_bounds_sq: Vec<f64>) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::Empty("candidate thresholds"));
        }
        if taus.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("candidate thresholds must be sorted ascending".into()));
        }
        let objective: Vec<f64> = var_hats.iter().zip(&bias_bounds_sq).map(|(v, b)| v + b).collect();
        let mut chosen_index = 0;
        for (j, &o) in objective.iter().enumerate() {
            if o < objective[chosen_index] {
                chosen_index = j;
            }
        }
        Ok(Self {
            taus,
            var_hats,
            bias_bounds_sq,
            objective,
            chosen_index,
        })
    }
}

/// (1/n²) Σ (Y_i − Ȳ)², the variance of the mean of `values` with the
/// biased divisor.
pub fn variance_of_mean(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n * n)
}

/// Squared average of E_π[R_max 1(ρ > τ) | x_i] over the log, from a
/// precomputed table of caps.
pub fn bias_bound_sq_cached(w: &WeightedLog<'_>, caps: &Predictions, tau: f64) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..w.len() {
        let mut inner = 0.0;
        for ((&rho, &cap), &p) in w.rho_row(i)?.iter().zip(caps.row(i)).zip(w.target_row(i)) {
            if rho > tau {
                inner += cap * p;
            }
        }
        total += inner;
    }
    let mean = total / w.len() as f64;
    Ok(mean * mean)
}

/// Self-normalized truncated IPS variance by the delta method,
/// (1/n²) Σ (w_i (r_i − v̂))² / w̄² with w_i = min(ρ_i, τ).
fn trun_variance(w: &WeightedLog<'_>, tau: f64) -> Result<f64> {
    let value = w.trun_ips(tau)?;
    let n = w.len() as f64;
    let weights: Vec<f64> = w.rho_logged().iter().map(|r| r.min(tau)).collect();
    let mean_w = weights.iter().sum::<f64>() / n;
    let ss: f64 = weights
        .iter()
        .zip(w.log().records())
        .map(|(wi, rec)| {
            let d = wi * (rec.reward - value);
            d * d
        })
        .sum();
    Ok(ss / (n * n * mean_w * mean_w))
}

/// The estimator whose threshold is being tuned, with its prediction tables.
#[derive(Clone, Copy)]
pub enum Tunable<'p> {
    Switch { impute: &'p Predictions },
    SwitchDr { dr: &'p Predictions, impute: &'p Predictions },
    TrimIps,
    TrunIps,
}

impl Tunable<'_> {
    /// Per-record values whose mean is the estimate at `tau`. Not defined
    /// for truncated IPS, which is a ratio estimator.
    pub fn record_values(&self, w: &WeightedLog<'_>, tau: f64) -> Result<Vec<f64>> {
        match *self {
            Tunable::Switch { impute } => w.switch_values(impute, tau),
            Tunable::SwitchDr { dr, impute } => w.switch_dr_values(dr, impute, tau),
            Tunable::TrimIps => w.switch_values(&Predictions::zeros(w.len(), w.num_actions()), tau),
            Tunable::TrunIps => Err(Error::Config("truncated IPS has no per-record decomposition".into())),
        }
    }

    pub fn estimate(&self, w: &WeightedLog<'_>, tau: f64) -> Result<f64> {
        match *self {
            Tunable::Switch { impute } => w.switch(impute, tau),
            Tunable::SwitchDr { dr, impute } => w.switch_dr(dr, impute, tau),
            Tunable::TrimIps => w.trim_ips(tau),
            Tunable::TrunIps => w.trun_ips(tau),
        }
    }

    fn var_hat(&self, w: &WeightedLog<'_>, tau: f64) -> Result<f64> {
        match self {
            Tunable::TrunIps => trun_variance(w, tau),
            _ => Ok(variance_of_mean(&self.record_values(w, tau)?)),
        }
    }
}

/// Evaluates Var̂_τ + Biaŝ²_τ over `taus` for any tunable estimator.
pub fn select_tau_cached(
    w: &WeightedLog<'_>,
    estimator: Tunable<'_>,
    caps: &Predictions,
    taus: &[f64],
) -> Result<TuningTrace> {
    let mut var_hats = Vec::with_capacity(taus.len());
    let mut biases = Vec::with_capacity(taus.len());
    for &tau in taus {
        var_hats.push(estimator.var_hat(w, tau)?);
        biases.push(bias_bound_sq_cached(w, caps, tau)?);
    }
    TuningTrace::from_parts(taus.to_vec(), var_hats, biases)
}

/// Tunes τ and returns the estimate at the chosen threshold together with
/// the trace.
pub fn tuned_estimate(
    w: &WeightedLog<'_>,
    estimator: Tunable<'_>,
    caps: &Predictions,
    taus: &[f64],
) -> Result<(EstimateReport, TuningTrace)> {
    let trace = select_tau_cached(w, estimator, caps, taus)?;
    let j = trace.chosen_index;
    let report = EstimateReport {
        value: estimator.estimate(w, trace.taus[j])?,
        tau: Some(trace.taus[j]),
        var_hat: Some(trace.var_hats[j]),
        bias_bound_sq: Some(trace.bias_bounds_sq[j]),
    };
    Ok((report, trace))
}

/// Y_i(τ) for a single record.
pub fn per_record_value(
    record: &LogRecord,
    num_actions: usize,
    target: &dyn Policy,
    logging: &dyn Policy,
    impute_model: &dyn RewardModel,
    tau: f64,
) -> Result<f64> {
    let log = BanditLog::new(vec![record.clone()], num_actions)?;
    let w = WeightedLog::new(&log, target, Some(logging))?;
    Ok(w.switch_values(&w.predictions(impute_model)?, tau)?[0])
}

/// Var̂_τ of the SWITCH estimate.
pub fn var_hat(
    log: &BanditLog,
    target: &dyn Policy,
    logging: &dyn Policy,
    impute_model: &dyn RewardModel,
    tau: f64,
) -> Result<f64> {
    let w = WeightedLog::new(log, target, Some(logging))?;
    Ok(variance_of_mean(&w.switch_values(&w.predictions(impute_model)?, tau)?))
}

/// Biaŝ²_τ with a caller-supplied reward cap R_max(x, a).
pub fn bias_bound_sq(
    log: &BanditLog,
    target: &dyn Policy,
    logging: &dyn Policy,
    reward_cap: &dyn Fn(&FeatureVector, usize) -> f64,
    tau: f64,
) -> Result<f64> {
    let w = WeightedLog::new(log, target, Some(logging))?;
    let caps = w.action_table(|_, x, a| reward_cap(x, a));
    bias_bound_sq_cached(&w, &caps, tau)
}

/// Picks τ̂ = argmin Var̂_τ + Biaŝ²_τ over `taus` for the SWITCH estimator;
/// ties go to the smallest τ.
pub fn select_tau(
    log: &BanditLog,
    target: &dyn Policy,
    logging: &dyn Policy,
    impute_model: &dyn RewardModel,
    reward_cap: &dyn Fn(&FeatureVector, usize) -> f64,
    taus: &[f64],
) -> Result<TuningTrace> {
    let w = WeightedLog::new(log, target, Some(logging))?;
    let impute = w.predictions(impute_model)?;
    let caps = w.action_table(|_, x, a| reward_cap(x, a));
    select_tau_cached(&w, Tunable::Switch { impute: &impute }, &caps, taus)
}

/// Result of [`magic_weights`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MagicFit {
    pub estimates: Vec<f64>,
    pub weights: Vec<f64>,
    pub objective: f64,
    pub value: f64,
}

const MAGIC_ITERATIONS: usize = 500;
const POWER_ITERATIONS: usize = 50;

/// Simplified MAGIC: a convex combination of SWITCH estimates across
/// thresholds.
///
/// The covariance of the per-record value vectors (Y_i(τ_1), ..., Y_i(τ_J))
/// is estimated with divisor n², the bias of each candidate is proxied by
/// its distance to the largest-τ estimate, and simplex weights minimizing
/// wᵀ(Cov + bbᵀ)w are found by projected gradient descent (500 steps of size
/// 1/L, L from 50 power iterations). The best pure-τ weight vector is kept if
/// it beats the descent iterate.
pub fn magic_weights(per_tau_values: &[Vec<f64>]) -> Result<MagicFit> {
    let j_count = per_tau_values.len();
    if j_count == 0 {
        return Err(Error::Empty("candidate thresholds"));
    }
    let n = per_tau_values[0].len();
    if n == 0 || per_tau_values.iter().any(|v| v.len() != n) {
        return Err(Error::Config("per-threshold value vectors must share a nonzero length".into()));
    }
    let nf = n as f64;
    let estimates: Vec<f64> = per_tau_values.iter().map(|v| v.iter().sum::<f64>() / nf).collect();
    let reference = estimates[j_count - 1];
    let bias: Vec<f64> = estimates.iter().map(|e| e - reference).collect();
    let mut a = vec![vec![0.0; j_count]; j_count];
    for j in 0..j_count {
        for l in j..j_count {
            let cov: f64 = per_tau_values[j]
                .iter()
                .zip(&per_tau_values[l])
                .map(|(x, y)| (x - estimates[j]) * (y - estimates[l]))
                .sum::<f64>()
                / (nf * nf);
            a[j][l] = cov + bias[j] * bias[l];
            a[l][j] = a[j][l];
        }
    }
    let objective = |w: &[f64]| -> f64 {
        let mut s = 0.0;
        for j in 0..j_count {
            for l in 0..j_count {
                s += w[j] * a[j][l] * w[l];
            }
        }
        s
    };

    let mut best_vertex = 0;
    for j in 1..j_count {
        if a[j][j] < a[best_vertex][best_vertex] {
            best_vertex = j;
        }
    }
    let mut w = vec![0.0; j_count];
    w[best_vertex] = 1.0;
    let vertex = w.clone();

    let lipschitz = 2.0 * largest_eigenvalue(&a);
    if lipschitz > 0.0 && lipschitz.is_finite() {
        let step = 1.0 / lipschitz;
        for _ in 0..MAGIC_ITERATIONS {
            let grad: Vec<f64> = (0..j_count)
                .map(|j| 2.0 * (0..j_count).map(|l| a[j][l] * w[l]).sum::<f64>())
                .collect();
            let moved: Vec<f64> = w.iter().zip(&grad).map(|(wi, g)| wi - step * g).collect();
            w = project_to_simplex(&moved);
        }
    }
    let (weights, obj) = {
        let (ow, ov) = (objective(&w), objective(&vertex));
        if ow < ov {
            (w, ow)
        } else {
            (vertex, ov)
        }
    };
    let mut value = 0.0;
    for (wj, ej) in weights.iter().zip(&estimates) {
        if *wj != 0.0 {
            value += wj * ej;
        }
    }
    Ok(MagicFit {
        estimates,
        weights,
        objective: obj,
        value,
    })
}

/// Simplified MAGIC over SWITCH estimates at `taus`.
pub fn magic_combine(
    log: &BanditLog,
    target: &dyn Policy,
    logging: &dyn Policy,
    impute_model: &dyn RewardModel,
    taus: &[f64],
) -> Result<EstimateReport> {
    let w = WeightedLog::new(log, target, Some(logging))?;
    let impute = w.predictions(impute_model)?;
    let values = taus
        .iter()
        .map(|&t| w.switch_values(&impute, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(EstimateReport::value(magic_weights(&values)?.value))
}

fn largest_eigenvalue(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let av: Vec<f64> = (0..n).map(|j| (0..n).map(|l| a[j][l] * v[l]).sum()).collect();
        let norm = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = av.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumulative += uj;
        let t = (cumulative - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}
