//! Closed-form risks, risk bounds and hard instances on finite problems,
//! with a Monte-Carlo MSE oracle to test them against.
//!
//! All closed forms are exact sums over the instance tables. Expectations
//! written `E_μ` are over x ~ λ, a ~ μ(·|x); `E_π` uses the target policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit_sim::sample_index;
use crate::domain::{context_features, BanditLog, FeatureVector, LogRecord};
use crate::error::{Error, Result};
use crate::estimators::{geometric_grid, RewardModel, WeightedLog};
use crate::instance::{policy_value_exact, FiniteInstance, RewardNoise, Which};
use crate::seed::mix_seed;

/// ε(x, a) = r̂(x, a) − r*(x, a) for a tabular model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceBias {
    pub epsilon_table: Vec<Vec<f64>>,
}

impl InstanceBias {
    /// Requires the model to lie in `[0, R_max]` cellwise.
    pub fn new(instance: &FiniteInstance, model_table: &[Vec<f64>]) -> Result<Self> {
        check_model(instance, model_table)?;
        let epsilon_table = model_table
            .iter()
            .zip(&instance.mean_reward)
            .map(|(m, r)| m.iter().zip(r).map(|(a, b)| a - b).collect())
            .collect();
        Ok(Self { epsilon_table })
    }
}

fn check_model(instance: &FiniteInstance, table: &[Vec<f64>]) -> Result<()> {
    let (m, k) = (instance.num_contexts(), instance.num_actions());
    if table.len() != m || table.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidInstance(format!("model table must be {m}x{k}")));
    }
    for x in 0..m {
        for a in 0..k {
            let v = table[x][a];
            if !(v.is_finite() && 0.0 <= v && v <= instance.reward_cap[x][a]) {
                return Err(Error::InvalidInstance(format!(
                    "model[{x}][{a}] = {v} outside [0, {}]",
                    instance.reward_cap[x][a]
                )));
            }
        }
    }
    Ok(())
}

fn check_n(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Domain("sample size must be at least 1".into()));
    }
    Ok(n as f64)
}

/// Exact MSE of DR with a fixed tabular model at sample size `n`:
/// `(E_μ[ρ²σ²] + Var_x E_μ[ρr*|x] + E_x Var_μ[ρ(r̂−r*)|x]) / n`.
pub fn dr_closed_form_mse(instance: &FiniteInstance, model_table: &[Vec<f64>], n: usize) -> Result<f64> {
    Ok(dr_closed_form_terms(instance, model_table)?.iter().sum::<f64>() / check_n(n)?)
}

/// The three variance components of [`dr_closed_form_mse`], before
/// dividing by `n`: noise, context and model-error variance.
pub fn dr_closed_form_terms(instance: &FiniteInstance, model_table: &[Vec<f64>]) -> Result<[f64; 3]> {
    let bias = InstanceBias::new(instance, model_table)?;
    let inst = instance;
    let noise = inst.expect_logging(|x, a| (inst.rho(x, a) * inst.noise_sd[x][a]).powi(2));
    let mut context_mean = 0.0;
    let mut context_sq = 0.0;
    let mut model_var = 0.0;
    for x in 0..inst.num_contexts() {
        let lambda = inst.context_probs[x];
        let mut v = 0.0;
        let mut e1 = 0.0;
        let mut e2 = 0.0;
        for a in 0..inst.num_actions() {
            let mu = inst.logging[x][a];
            if mu > 0.0 {
                let rho = inst.rho(x, a);
                v += mu * rho * inst.mean_reward[x][a];
                let d = rho * bias.epsilon_table[x][a];
                e1 += mu * d;
                e2 += mu * d * d;
            }
        }
        context_mean += lambda * v;
        context_sq += lambda * v * v;
        model_var += lambda * (e2 - e1 * e1).max(0.0);
    }
    let context_var = (context_sq - context_mean * context_mean).max(0.0);
    Ok([noise, context_var, model_var])
}

/// Upper bound on the MSE of SWITCH with threshold `tau` and a tabular
/// imputation model.
pub fn switch_mse_bound(instance: &FiniteInstance, model_table: &[Vec<f64>], tau: f64, n: usize) -> Result<f64> {
    let nf = check_n(n)?;
    if !(tau >= 0.0) {
        return Err(Error::InvalidThreshold(tau));
    }
    let bias = InstanceBias::new(instance, model_table)?;
    let inst = instance;
    let kept = inst.expect_logging(|x, a| {
        let rho = inst.rho(x, a);
        if rho <= tau {
            let (s, r) = (inst.noise_sd[x][a], inst.reward_cap[x][a]);
            (s * s + r * r) * rho * rho
        } else {
            0.0
        }
    });
    let imputed = inst.expect_target(|x, a| {
        if inst.rho(x, a) > tau {
            inst.reward_cap[x][a].powi(2)
        } else {
            0.0
        }
    });
    let b = inst.expect_target(|x, a| if inst.rho(x, a) > tau { bias.epsilon_table[x][a] } else { 0.0 });
    Ok(2.0 / nf * (kept + imputed) + b * b)
}

/// ξ_γ(x, a) = 1(λ(x)μ(a|x) ≤ γ).
pub fn xi_table(instance: &FiniteInstance, gamma: f64) -> Vec<Vec<bool>> {
    (0..instance.num_contexts())
        .map(|x| (0..instance.num_actions()).map(|a| instance.joint_mass(x, a) <= gamma).collect())
        .collect()
}

fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if num == 0.0 && den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Moment-ratio constant `2^{2+ε} max{ratio(ρσ), ratio(ξρR)}` where
/// `ratio(Z) = E[|Z|^{2+ε}]² / E[Z²]^{2+ε}` and 0/0 = 0.
pub fn c_gamma(instance: &FiniteInstance, gamma: f64, epsilon_moment: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Domain(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    if !(epsilon_moment > 0.0 && epsilon_moment.is_finite()) {
        return Err(Error::Domain(format!("moment exponent must be positive, got {epsilon_moment}")));
    }
    let inst = instance;
    let p = 2.0 + epsilon_moment;
    let xi = xi_table(inst, gamma);
    let ratio = |z: &dyn Fn(usize, usize) -> f64| {
        let hi = inst.expect_logging(|x, a| z(x, a).abs().powf(p));
        let two = inst.expect_logging(|x, a| z(x, a).powi(2));
        ratio_or_zero(hi * hi, two.powf(p))
    };
    let sigma_ratio = ratio(&|x, a| inst.rho(x, a) * inst.noise_sd[x][a]);
    let cap_ratio = ratio(&|x, a| {
        if xi[x][a] {
            inst.rho(x, a) * inst.reward_cap[x][a]
        } else {
            0.0
        }
    });
    Ok(2f64.powf(p) * sigma_ratio.max(cap_ratio))
}

/// γ log(5/γ), continuous at γ = 0.
pub fn gamma_log_term(gamma: f64) -> f64 {
    if gamma == 0.0 {
        0.0
    } else {
        gamma * (5.0 / gamma).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LowerBound {
    pub value: f64,
    /// Whether `n` is large enough for the bound's moment conditions.
    pub preconditions_met: bool,
    pub c_gamma: f64,
    pub required_n: f64,
}

/// Minimax lower bound
/// `(E_μ[ρ²σ²] + E_μ[ξρ²R²](1 − 350nγ log(5/γ))) / (700n)`.
pub fn minimax_lower_bound(instance: &FiniteInstance, gamma: f64, n: usize, epsilon_moment: f64) -> Result<LowerBound> {
    let nf = check_n(n)?;
    let c = c_gamma(instance, gamma, epsilon_moment)?;
    let inst = instance;
    let xi = xi_table(inst, gamma);
    let noise = inst.expect_logging(|x, a| (inst.rho(x, a) * inst.noise_sd[x][a]).powi(2));
    let cap = inst.expect_logging(|x, a| {
        if xi[x][a] {
            (inst.rho(x, a) * inst.reward_cap[x][a]).powi(2)
        } else {
            0.0
        }
    });
    let value = (noise + cap * (1.0 - 350.0 * nf * gamma_log_term(gamma))) / (700.0 * nf);
    let snr = inst.expect_logging(|x, a| ratio_or_zero(inst.noise_sd[x][a].powi(2), inst.reward_cap[x][a].powi(2)));
    let required_n = (16.0 * c.powf(1.0 / epsilon_moment)).max(2.0 * c.powf(2.0 / epsilon_moment) * snr);
    Ok(LowerBound {
        value,
        preconditions_met: nf >= required_n,
        c_gamma: c,
        required_n,
    })
}

/// Noise-driven lower bound
/// `(E/(32en))·[1 − E[ρ²σ²·1(ρσ² > R√(nE/2))]/E]²` with `E = E_μ[ρ²σ²]`.
pub fn lb_sigma_expr(instance: &FiniteInstance, n: usize) -> Result<f64> {
    let nf = check_n(n)?;
    let inst = instance;
    let e = inst.expect_logging(|x, a| (inst.rho(x, a) * inst.noise_sd[x][a]).powi(2));
    if e == 0.0 {
        return Ok(0.0);
    }
    let level = (nf * e / 2.0).sqrt();
    let tail = inst.expect_logging(|x, a| {
        let (rho, s) = (inst.rho(x, a), inst.noise_sd[x][a]);
        if rho * s * s > inst.reward_cap[x][a] * level {
            (rho * s).powi(2)
        } else {
            0.0
        }
    });
    Ok(e / (32.0 * std::f64::consts::E * nf) * (1.0 - tail / e).powi(2))
}

/// Reward-range lower bound on a finite instance:
/// `(A/(32en))·[1 − E[ξρ²R²·1(ξρR > √(nA/16))]/A]² − γ log(5/γ)·A` with
/// `A = E_μ[ξρ²R²]`.
pub fn lb_rmax_expr(instance: &FiniteInstance, gamma: f64, n: usize) -> Result<f64> {
    let nf = check_n(n)?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Domain(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let inst = instance;
    let xi = xi_table(inst, gamma);
    let z = |x: usize, a: usize| if xi[x][a] { inst.rho(x, a) * inst.reward_cap[x][a] } else { 0.0 };
    let mass = inst.expect_logging(|x, a| z(x, a).powi(2));
    if mass == 0.0 {
        return Ok(0.0);
    }
    let level = (nf * mass / 16.0).sqrt();
    let tail = inst.expect_logging(|x, a| if z(x, a) > level { z(x, a).powi(2) } else { 0.0 });
    Ok(mass / (32.0 * std::f64::consts::E * nf) * (1.0 - tail / mass).powi(2) - gamma_log_term(gamma) * mass)
}

/// Two mean-reward tables that are hard to tell apart from `n` samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HardPair {
    pub eta_1: Vec<Vec<f64>>,
    pub eta_2: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub alpha: f64,
    pub delta: Vec<Vec<f64>>,
}

impl HardPair {
    /// The two members as instances with Gaussian noise.
    pub fn instances(&self, base: &FiniteInstance) -> Result<[FiniteInstance; 2]> {
        let one = base.with_mean_reward(self.eta_1.clone())?.with_noise(RewardNoise::Gaussian);
        let two = base.with_mean_reward(self.eta_2.clone())?.with_noise(RewardNoise::Gaussian);
        Ok([one, two])
    }

    /// `E_μ[Δ²/(2σ²)]` with 0/0 = 0; feasibility requires at most `1/n`.
    pub fn divergence(&self, base: &FiniteInstance) -> f64 {
        base.expect_logging(|x, a| ratio_or_zero(self.delta[x][a].powi(2), 2.0 * self.sigma[x][a].powi(2)))
    }
}

/// Gaussian two-point construction: `Δ = min{ασ²ρ/E, R_max}` with
/// `α = √(2E/n)` and `E = E_μ[ρ²σ²]`; η₁ = Δ, η₂ = 0.
pub fn gaussian_hard_pair(instance: &FiniteInstance, n: usize) -> Result<HardPair> {
    let nf = check_n(n)?;
    let inst = instance;
    let e = inst.expect_logging(|x, a| (inst.rho(x, a) * inst.noise_sd[x][a]).powi(2));
    if e == 0.0 {
        return Err(Error::Domain("E_μ[ρ²σ²] = 0: no noise to hide a perturbation in".into()));
    }
    let alpha = (2.0 * e / nf).sqrt();
    let delta: Vec<Vec<f64>> = (0..inst.num_contexts())
        .map(|x| {
            (0..inst.num_actions())
                .map(|a| (alpha * inst.noise_sd[x][a].powi(2) * inst.rho(x, a) / e).min(inst.reward_cap[x][a]))
                .collect()
        })
        .collect();
    Ok(HardPair {
        eta_1: delta.clone(),
        eta_2: vec![vec![0.0; inst.num_actions()]; inst.num_contexts()],
        sigma: inst.noise_sd.clone(),
        alpha,
        delta,
    })
}

/// Scaled-Bernoulli prior pair over mean rewards.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BernoulliPrior {
    pub theta_1: Vec<Vec<f64>>,
    pub theta_2: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
    pub xi: Vec<Vec<bool>>,
    pub alpha: f64,
}

impl BernoulliPrior {
    /// `(1/4)E_μ[ξΔ²]`; feasibility requires at most `1/n`.
    pub fn divergence(&self, base: &FiniteInstance) -> f64 {
        0.25 * base.expect_logging(|x, a| if self.xi[x][a] { self.delta[x][a].powi(2) } else { 0.0 })
    }

    /// Draws a mean-reward table: η = ξR with probability θ, otherwise 0.
    pub fn sample_means(&self, base: &FiniteInstance, second: bool, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        let theta = if second { &self.theta_2 } else { &self.theta_1 };
        (0..base.num_contexts())
            .map(|x| {
                (0..base.num_actions())
                    .map(|a| {
                        let hit = rng.random::<f64>() < theta[x][a];
                        if hit && self.xi[x][a] {
                            base.reward_cap[x][a]
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Prior with θ₂ ≡ 1/2 and θ₁ = θ₂ + Δ, `Δ = min{ξρRα/A, 1/2}`,
/// `α = √(4A/n)`, `A = E_μ[ξρ²R²]`.
pub fn bernoulli_hard_prior(instance: &FiniteInstance, gamma: f64, n: usize) -> Result<BernoulliPrior> {
    let nf = check_n(n)?;
    let inst = instance;
    let xi = xi_table(inst, gamma);
    let z = |x: usize, a: usize| if xi[x][a] { inst.rho(x, a) * inst.reward_cap[x][a] } else { 0.0 };
    let mass = inst.expect_logging(|x, a| z(x, a).powi(2));
    if mass == 0.0 {
        return Err(Error::Domain("E_μ[ξρ²R²] = 0 for this γ".into()));
    }
    let alpha = (4.0 * mass / nf).sqrt();
    let delta: Vec<Vec<f64>> = (0..inst.num_contexts())
        .map(|x| (0..inst.num_actions()).map(|a| (z(x, a) * alpha / mass).min(0.5)).collect())
        .collect();
    let theta_2 = vec![vec![0.5; inst.num_actions()]; inst.num_contexts()];
    let theta_1 = delta.iter().map(|row| row.iter().map(|d| 0.5 + d).collect()).collect();
    Ok(BernoulliPrior {
        theta_1,
        theta_2,
        delta,
        xi,
        alpha,
    })
}

/// KL(Ber(p) ‖ Ber(q)) and its χ²-type upper bound `(p−q)²(1/q + 1/(1−q))`.
pub fn kl_bernoulli_bound(p: f64, q: f64) -> Result<(f64, f64)> {
    for v in [p, q] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Domain(format!("Bernoulli parameters must lie in (0, 1), got {v}")));
        }
    }
    let kl = p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
    let bound = (p - q).powi(2) * (1.0 / q + 1.0 / (1.0 - q));
    Ok((kl, bound))
}

/// Geometric grid of `count` thresholds between the smallest positive and
/// the largest importance weight of an instance.
pub fn instance_threshold_grid(instance: &FiniteInstance, count: usize) -> Result<Vec<f64>> {
    let rhos: Vec<f64> = instance.rho_table().into_iter().flatten().collect();
    let lo = rhos.iter().copied().filter(|&r| r > 0.0).fold(f64::INFINITY, f64::min);
    if !lo.is_finite() {
        return Err(Error::NoPositiveWeight);
    }
    let hi = rhos.iter().copied().fold(0.0, f64::max);
    Ok(geometric_grid(lo, hi, count))
}

/// Reward model used inside Monte-Carlo replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    /// A fixed context × action table.
    Fixed(Vec<Vec<f64>>),
    /// Per-cell empirical mean reward of the log itself; unseen cells predict 0.
    CellMean,
}

/// An estimator with its settings, for Monte-Carlo evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EstimatorSpec {
    Ips,
    Dm { model: ModelSpec },
    Dr { model: ModelSpec },
    Switch { model: ModelSpec, tau: f64 },
    SwitchDr { model: ModelSpec, tau: f64 },
    TrimIps { tau: f64 },
    /// Self-normalized; a zero normalizer yields 0.
    TrunIps { tau: f64 },
    /// Ignores the data.
    Constant { value: f64 },
}

struct CellModel<'a> {
    table: Vec<Vec<f64>>,
    caps: &'a [Vec<f64>],
}

impl RewardModel for CellModel<'_> {
    fn predict(&self, x: &FeatureVector, action: usize) -> f64 {
        self.table[crate::domain::context_index(x)][action]
    }

    fn reward_cap(&self, x: &FeatureVector, action: usize) -> f64 {
        self.caps[crate::domain::context_index(x)][action]
    }
}

fn cell_means(log: &BanditLog, m: usize, k: usize) -> Vec<Vec<f64>> {
    let mut sum = vec![vec![0.0; k]; m];
    let mut count = vec![vec![0usize; k]; m];
    for r in log.records() {
        let x = crate::domain::context_index(&r.features);
        sum[x][r.action] += r.reward;
        count[x][r.action] += 1;
    }
    for x in 0..m {
        for a in 0..k {
            if count[x][a] > 0 {
                sum[x][a] /= count[x][a] as f64;
            }
        }
    }
    sum
}

/// Draws a log of `n` records: x ~ λ, a ~ μ(·|x), rewards from the
/// instance's noise model. Features are the one-element context index.
pub fn simulate_instance_log(instance: &FiniteInstance, n: usize, rng: &mut impl Rng) -> Result<BanditLog> {
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sample_index(&instance.context_probs, rng);
        let a = sample_index(&instance.logging[x], rng);
        let mean = instance.mean_reward[x][a];
        let reward = match instance.noise {
            RewardNoise::Gaussian => mean + instance.noise_sd[x][a] * rng.sample::<f64, _>(StandardNormal),
            RewardNoise::ScaledBernoulli => {
                let cap = instance.reward_cap[x][a];
                if cap > 0.0 && rng.random::<f64>() < mean / cap {
                    cap
                } else {
                    0.0
                }
            }
        };
        records.push(LogRecord::new(context_features(x), a, reward, instance.logging[x][a])?);
    }
    BanditLog::new(records, instance.num_actions())
}

fn run_spec(spec: &EstimatorSpec, w: &WeightedLog<'_>, instance: &FiniteInstance) -> Result<f64> {
    let model = |m: &ModelSpec| -> Result<_> {
        let table = match m {
            ModelSpec::Fixed(t) => t.clone(),
            ModelSpec::CellMean => cell_means(w.log(), instance.num_contexts(), instance.num_actions()),
        };
        w.predictions(&CellModel {
            table,
            caps: &instance.reward_cap,
        })
    };
    match spec {
        EstimatorSpec::Ips => Ok(w.ips()),
        EstimatorSpec::Dm { model: m } => Ok(w.dm(&model(m)?)),
        EstimatorSpec::Dr { model: m } => Ok(w.dr(&model(m)?)),
        EstimatorSpec::Switch { model: m, tau } => w.switch(&model(m)?, *tau),
        EstimatorSpec::SwitchDr { model: m, tau } => {
            let p = model(m)?;
            w.switch_dr(&p, &p, *tau)
        }
        EstimatorSpec::TrimIps { tau } => w.trim_ips(*tau),
        EstimatorSpec::TrunIps { tau } => match w.trun_ips(*tau) {
            Err(Error::DegenerateNormalizer) => Ok(0.0),
            other => other,
        },
        EstimatorSpec::Constant { value } => Ok(*value),
    }
}

/// Monte-Carlo MSE against the exact target value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MseEstimate {
    pub mse: f64,
    pub std_err: f64,
    pub replicates: usize,
}

impl MseEstimate {
    /// Mean and standard error of the per-replicate squared errors.
    pub fn from_squared_errors(errors: &[f64]) -> Self {
        let r = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / r;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (r - 1.0).max(1.0);
        Self {
            mse: mean,
            std_err: (var / r).sqrt(),
            replicates: errors.len(),
        }
    }
}

/// MSE of one estimator over `replicates` simulated logs of size `n`.
pub fn empirical_mse(
    spec: &EstimatorSpec,
    instance: &FiniteInstance,
    n: usize,
    replicates: usize,
    seed: u64,
) -> Result<MseEstimate> {
    Ok(empirical_mse_many(std::slice::from_ref(spec), instance, n, replicates, seed)?[0])
}

/// MSEs of several estimators, all evaluated on the same simulated logs.
/// Replicate `i` uses a seed derived from `(seed, i)`, so the result does
/// not depend on the thread count.
pub fn empirical_mse_many(
    specs: &[EstimatorSpec],
    instance: &FiniteInstance,
    n: usize,
    replicates: usize,
    seed: u64,
) -> Result<Vec<MseEstimate>> {
    if replicates < 2 {
        return Err(Error::TooFewRecords {
            needed: 2,
            got: replicates,
        });
    }
    check_n(n)?;
    instance.validate()?;
    let truth = policy_value_exact(instance, Which::Target);
    let target = instance.target_policy();
    let logging = instance.logging_policy();
    let errors: Vec<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map(|i| {
            let rep_seed = mix_seed(&[seed, i as u64]);
            let wrap = |source: Error| Error::Replicate {
                dataset: "instance".into(),
                n,
                replicate: i,
                seed: rep_seed,
                source: Box::new(source),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
            let log = simulate_instance_log(instance, n, &mut rng).map_err(wrap)?;
            let w = WeightedLog::new(&log, &target, Some(&logging)).map_err(wrap)?;
            specs
                .iter()
                .map(|s| run_spec(s, &w, instance).map(|v| (v - truth).powi(2)).map_err(wrap))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok((0..specs.len())
        .map(|j| {
            let col: Vec<f64> = errors.iter().map(|row| row[j]).collect();
            MseEstimate::from_squared_errors(&col)
        })
        .collect())
}

/// One line of the theory-check report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Left-hand side of the comparison (should be ≤ `rhs`).
    pub lhs: f64,
    pub rhs: f64,
    /// Monte-Carlo allowance added to `rhs`.
    pub slack: f64,
    pub passed: bool,
}

impl CheckResult {
    fn le(name: impl Into<String>, lhs: f64, rhs: f64, slack: f64) -> Self {
        Self {
            name: name.into(),
            lhs,
            rhs,
            slack,
            passed: lhs <= rhs + slack,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoryCheckConfig {
    pub replicates: usize,
    pub seed: u64,
    /// Standard errors of Monte-Carlo slack in sandwich checks.
    pub se_slack: f64,
    pub grid_size: usize,
}

impl Default for TheoryCheckConfig {
    fn default() -> Self {
        Self {
            replicates: 20_000,
            seed: 0,
            se_slack: 3.0,
            grid_size: 21,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryReport {
    pub config: TheoryCheckConfig,
    pub checks: Vec<CheckResult>,
}

impl TheoryReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Evaluates the closed forms on the shipped instances against
/// Monte-Carlo MSEs and checks the hard constructions' constraints.
pub fn run_theory_checks(config: &TheoryCheckConfig) -> Result<TheoryReport> {
    let reps = config.replicates;
    let z = config.se_slack;
    let mut checks = Vec::new();

    let five = FiniteInstance::five_by_three();
    let model: Vec<Vec<f64>> = vec![vec![0.5; 3]; 5];
    let n = 10;
    let closed = dr_closed_form_mse(&five, &model, n)?;
    let mc = empirical_mse(&EstimatorSpec::Dr { model: ModelSpec::Fixed(model) }, &five, n, reps, config.seed)?;
    checks.push(CheckResult::le("dr_closed_form_vs_monte_carlo", (mc.mse - closed).abs(), 0.0, z * mc.std_err));

    let four = FiniteInstance::four_by_three();
    let model: Vec<Vec<f64>> = vec![vec![0.5; 3]; 4];
    let grid = instance_threshold_grid(&four, config.grid_size)?;
    let specs: Vec<EstimatorSpec> = grid
        .iter()
        .map(|&tau| EstimatorSpec::Switch {
            model: ModelSpec::Fixed(model.clone()),
            tau,
        })
        .collect();
    let n = 20;
    let mses = empirical_mse_many(&specs, &four, n, reps, config.seed ^ 1)?;
    for (tau, m) in grid.iter().zip(&mses) {
        let bound = switch_mse_bound(&four, &model, *tau, n)?;
        checks.push(CheckResult::le(format!("switch_bound tau={tau:.6}"), m.mse, bound, z * m.std_err));
    }

    for n in [20, 50, 100] {
        let pair = gaussian_hard_pair(&five, n)?;
        checks.push(CheckResult::le(format!("hard_pair_divergence n={n}"), pair.divergence(&five), 1.0 / n as f64, 1e-12));
        let lb = minimax_lower_bound(&five, 0.0, n, 2.0)?.value;
        let lbs = lb_sigma_expr(&five, n)?;
        for (name, spec) in [
            ("ips", EstimatorSpec::Ips),
            ("dr", EstimatorSpec::Dr { model: ModelSpec::CellMean }),
        ] {
            let mut worst: Option<MseEstimate> = None;
            for member in pair.instances(&five)? {
                let m = empirical_mse(&spec, &member, n, reps, config.seed ^ n as u64)?;
                if worst.is_none_or(|w| m.mse > w.mse) {
                    worst = Some(m);
                }
            }
            let worst = worst.expect("two members");
            checks.push(CheckResult::le(format!("minimax_lb<=mse({name}) n={n}"), lb, worst.mse, z * worst.std_err));
            checks.push(CheckResult::le(format!("lb_sigma<=mse({name}) n={n}"), lbs, worst.mse, z * worst.std_err));
        }
        let prior = bernoulli_hard_prior(&five, 1.0, n)?;
        checks.push(CheckResult::le(format!("bernoulli_prior_divergence n={n}"), prior.divergence(&five), 1.0 / n as f64, 1e-12));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut worst_gap = f64::NEG_INFINITY;
    for _ in 0..10_000 {
        let p = rng.random_range(1e-6..1.0 - 1e-6);
        let q = rng.random_range(1e-6..1.0 - 1e-6);
        let (kl, bound) = kl_bernoulli_bound(p, q)?;
        worst_gap = worst_gap.max(kl - bound);
    }
    checks.push(CheckResult::le("kl_bernoulli_bound (max kl - bound)", worst_gap, 0.0, 1e-12));

    Ok(TheoryReport {
        config: *config,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_context(mu: Vec<f64>, pi: Vec<f64>, r: Vec<f64>, sd: Vec<f64>, cap: Vec<f64>) -> FiniteInstance {
        FiniteInstance::new(vec![1.0], vec![mu], vec![pi], vec![r], vec![sd], vec![cap]).unwrap()
    }

    #[test]
    fn dr_terms_vanish_where_expected() {
        let five = FiniteInstance::five_by_three();
        let perfect = five.mean_reward.clone();
        assert_eq!(dr_closed_form_terms(&five, &perfect).unwrap()[2], 0.0);
        let one = single_context(vec![0.5, 0.5], vec![0.2, 0.8], vec![0.3, 0.6], vec![0.1, 0.2], vec![1.0, 1.0]);
        assert_eq!(dr_closed_form_terms(&one, &[vec![0.0, 0.0]]).unwrap()[1], 0.0);
    }

    #[test]
    fn dr_zero_model_is_ips_variance() {
        // IPS variance: E_μ[ρ²(σ² + r*²)] − v²
        let five = FiniteInstance::five_by_three();
        let zero = vec![vec![0.0; 3]; 5];
        let v = policy_value_exact(&five, Which::Target);
        let second = five.expect_logging(|x, a| {
            five.rho(x, a).powi(2) * (five.noise_sd[x][a].powi(2) + five.mean_reward[x][a].powi(2))
        });
        let direct = (second - v * v) / 7.0;
        assert!((dr_closed_form_mse(&five, &zero, 7).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn switch_bound_regimes() {
        let four = FiniteInstance::four_by_three();
        let model = vec![vec![0.3; 3]; 4];
        let n = 12;
        let ips_part = four.expect_logging(|x, a| (four.noise_sd[x][a].powi(2) + 1.0) * four.rho(x, a).powi(2));
        let b = switch_mse_bound(&four, &model, four.max_rho(), n).unwrap();
        assert!((b - 2.0 / 12.0 * ips_part).abs() < 1e-15);
        let quiet = FiniteInstance {
            noise_sd: vec![vec![0.0; 3]; 4],
            ..four.clone()
        };
        let truth = quiet.mean_reward.clone();
        let b = switch_mse_bound(&quiet, &truth, 0.0, n).unwrap();
        // every positive-ρ pair is imputed; π-mass on ρ = 0 pairs is zero
        assert!((b - 2.0 / 12.0 * quiet.expect_target(|x, a| quiet.reward_cap[x][a].powi(2))).abs() < 1e-15);
    }

    #[test]
    fn c_gamma_examples() {
        let five = FiniteInstance::five_by_three();
        let quiet = FiniteInstance {
            noise_sd: vec![vec![0.0; 3]; 5],
            ..five.clone()
        };
        assert_eq!(c_gamma(&quiet, 0.0, 2.0).unwrap(), 0.0);
        // ρσ ≡ 1 on the support: μ uniform over two actions, π = μ, σ = 1
        let flat = single_context(vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5], vec![1.0, 1.0], vec![1.0, 1.0]);
        assert!(c_gamma(&flat, 0.0, 2.0).unwrap() >= 16.0);
    }

    #[test]
    fn c_gamma_enumeration() {
        // λ = (½, ½), μ rows (½, ½); ρσ = [[2, 0], [1, 1]] via π and σ
        let inst = FiniteInstance::new(
            vec![0.5, 0.5],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            vec![vec![1.0, 0.0], vec![0.5, 0.5]],
            vec![vec![0.0; 2]; 2],
            vec![vec![1.0, 7.0], vec![1.0, 1.0]],
            vec![vec![1.0; 2]; 2],
        )
        .unwrap();
        let cells = [2.0f64, 0.0, 1.0, 1.0];
        let m4: f64 = cells.iter().map(|z| 0.25 * z.powi(4)).sum();
        let m2: f64 = cells.iter().map(|z| 0.25 * z.powi(2)).sum();
        let sigma_ratio = m4 * m4 / m2.powi(4);
        // γ = 0 leaves ξ ≡ 0
        assert!((c_gamma(&inst, 0.0, 2.0).unwrap() - 16.0 * sigma_ratio).abs() < 1e-12);
        // γ = 1: ξ ≡ 1, ρR = [[2, 0], [1, 1]] as well
        assert!((c_gamma(&inst, 1.0, 2.0).unwrap() - 16.0 * sigma_ratio).abs() < 1e-12);
        assert!((sigma_ratio - (4.5f64).powi(2) / 1.5f64.powi(4)).abs() < 1e-12);
    }

    #[test]
    fn minimax_examples() {
        let five = FiniteInstance::five_by_three();
        let lb = minimax_lower_bound(&five, 0.0, 40, 2.0).unwrap();
        let noise = five.expect_logging(|x, a| (five.rho(x, a) * five.noise_sd[x][a]).powi(2));
        assert_eq!(lb.value, noise / (700.0 * 40.0));
        let quiet = FiniteInstance {
            noise_sd: vec![vec![0.0; 3]; 5],
            ..five
        };
        assert_eq!(minimax_lower_bound(&quiet, 0.0, 40, 2.0).unwrap().value, 0.0);
    }

    #[test]
    fn lb_sigma_examples() {
        let five = FiniteInstance::five_by_three();
        let quiet = FiniteInstance {
            noise_sd: vec![vec![0.0; 3]; 5],
            ..five.clone()
        };
        assert_eq!(lb_sigma_expr(&quiet, 10).unwrap(), 0.0);
        // σ ≤ 0.6, ρ ≤ 8 and R = 1 keep ρσ² far below R√(nE/2) at n = 50
        let e = five.expect_logging(|x, a| (five.rho(x, a) * five.noise_sd[x][a]).powi(2));
        assert_eq!(lb_sigma_expr(&five, 50).unwrap(), e / (32.0 * std::f64::consts::E * 50.0));
    }

    #[test]
    fn lb_rmax_examples() {
        let five = FiniteInstance::five_by_three();
        assert_eq!(lb_rmax_expr(&five, 1e-4, 10).unwrap(), 0.0);
        let a = five.expect_logging(|x, a| (five.rho(x, a) * five.reward_cap[x][a]).powi(2));
        let n = 1000;
        let level = (n as f64 * a / 16.0).sqrt();
        assert!(five.rho_table().iter().flatten().all(|&r| r <= level));
        let expected = a / (32.0 * std::f64::consts::E * n as f64) - 5f64.ln() * a;
        assert!((lb_rmax_expr(&five, 1.0, n).unwrap() - expected).abs() < 1e-15);
    }

    /// Near-uniform over many contexts, so every cell falls under a γ small
    /// enough for the subtracted term to stay below the leading term.
    fn many_context_instance(m: usize) -> FiniteInstance {
        let lambda: Vec<f64> = (0..m).map(|i| if i % 2 == 0 { 1.01 } else { 0.99 } / m as f64).collect();
        FiniteInstance::new(
            lambda,
            vec![vec![0.5, 0.5]; m],
            vec![vec![0.6, 0.4]; m],
            vec![vec![0.5; 2]; m],
            vec![vec![0.5; 2]; m],
            vec![vec![1.0; 2]; m],
        )
        .unwrap()
    }

    #[test]
    fn lb_rmax_positive_and_capped() {
        let inst = many_context_instance(20_000);
        let n = 24;
        let gamma = 2.6e-5;
        assert!(xi_table(&inst, gamma).iter().flatten().all(|&b| b));
        let v = lb_rmax_expr(&inst, gamma, n).unwrap();
        let full = inst.expect_logging(|x, a| (inst.rho(x, a) * inst.reward_cap[x][a]).powi(2));
        assert!(v > 0.0, "{v}");
        assert!(v <= full / (32.0 * std::f64::consts::E * n as f64));
    }

    #[test]
    fn lb_rmax_near_uniform_with_small_gamma_is_nonpositive() {
        // γ·log(5/γ) > 1/(32en) whenever γ = 1/(n log n)
        let m = 50;
        let lambda: Vec<f64> = (0..m).map(|i| if i % 2 == 0 { 1.01 } else { 0.99 } / m as f64).collect();
        let inst = FiniteInstance::new(
            lambda,
            vec![vec![0.5, 0.5]; m],
            vec![vec![0.9, 0.1]; m],
            vec![vec![0.5; 2]; m],
            vec![vec![0.5; 2]; m],
            vec![vec![1.0; 2]; m],
        )
        .unwrap();
        for n in [10usize, 100, 1000, 10_000] {
            let gamma = 1.0 / (n as f64 * (n as f64).ln());
            assert!(lb_rmax_expr(&inst, gamma, n).unwrap() <= 0.0);
        }
    }

    #[test]
    fn gaussian_pair_example() {
        let inst = single_context(vec![0.5, 0.5], vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0], vec![10.0, 10.0]);
        let pair = gaussian_hard_pair(&inst, 8).unwrap();
        assert!((pair.alpha - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((pair.delta[0][0] - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(pair.delta[0][1], 0.0);
        assert!(pair.eta_2.iter().flatten().all(|&v| v == 0.0));
        assert!(pair.divergence(&inst) <= 1.0 / 8.0 * (1.0 + 1e-12));
        let small = single_context(vec![0.5, 0.5], vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0], vec![0.01, 0.01]);
        assert_eq!(gaussian_hard_pair(&small, 8).unwrap().delta[0][0], 0.01);
        let quiet = single_context(vec![0.5, 0.5], vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0]);
        assert!(gaussian_hard_pair(&quiet, 8).is_err());
    }

    #[test]
    fn hard_constructions_are_feasible() {
        for inst in [FiniteInstance::five_by_three(), FiniteInstance::four_by_three()] {
            for n in [1usize, 5, 20, 100, 10_000] {
                let pair = gaussian_hard_pair(&inst, n).unwrap();
                assert!(pair.divergence(&inst) <= (1.0 + 1e-12) / n as f64);
                for x in 0..inst.num_contexts() {
                    for a in 0..inst.num_actions() {
                        assert!(0.0 <= pair.delta[x][a] && pair.delta[x][a] <= inst.reward_cap[x][a]);
                    }
                }
                let prior = bernoulli_hard_prior(&inst, 1.0, n).unwrap();
                assert!(prior.theta_2.iter().flatten().all(|&t| t == 0.5));
                assert!(prior.delta.iter().flatten().all(|&d| d <= 0.5));
                assert!(prior.divergence(&inst) <= (1.0 + 1e-12) / n as f64);
            }
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_bernoulli_bound(0.3, 0.3).unwrap(), (0.0, 0.0));
        let (kl, bound) = kl_bernoulli_bound(0.75, 0.5).unwrap();
        assert!((kl - (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln())).abs() < 1e-15);
        assert!((bound - 0.25).abs() < 1e-15);
        assert!(kl <= bound);
        assert!(kl_bernoulli_bound(0.0, 0.5).is_err());
        assert!(kl_bernoulli_bound(0.5, 1.0).is_err());
    }

    #[test]
    fn empirical_mse_trivial_cases() {
        let five = FiniteInstance::five_by_three();
        let v = policy_value_exact(&five, Which::Target);
        let m = empirical_mse(&EstimatorSpec::Constant { value: v }, &five, 5, 10, 0).unwrap();
        assert_eq!(m.mse, 0.0);
        let on_policy = single_context(vec![0.3, 0.7], vec![0.3, 0.7], vec![0.4, 0.4], vec![0.0, 0.0], vec![1.0, 1.0]);
        assert_eq!(empirical_mse(&EstimatorSpec::Ips, &on_policy, 6, 50, 1).unwrap().mse, 0.0);
        assert!(empirical_mse(&EstimatorSpec::Ips, &five, 5, 1, 0).is_err());
    }

    #[test]
    fn empirical_mse_is_deterministic() {
        let five = FiniteInstance::five_by_three();
        let a = empirical_mse(&EstimatorSpec::Ips, &five, 8, 500, 3).unwrap();
        let b = empirical_mse(&EstimatorSpec::Ips, &five, 8, 500, 3).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| empirical_mse(&EstimatorSpec::Ips, &five, 8, 500, 3).unwrap());
        assert_eq!(a, c);
    }

    #[test]
    fn ips_mse_matches_closed_form() {
        let five = FiniteInstance::five_by_three();
        let n = 10;
        let closed = dr_closed_form_mse(&five, &vec![vec![0.0; 3]; 5], n).unwrap();
        let m = empirical_mse(&EstimatorSpec::Ips, &five, n, 40_000, 11).unwrap();
        assert!((m.mse - closed).abs() <= 4.0 * m.std_err, "{} vs {closed} ± {}", m.mse, m.std_err);
    }

    #[test]
    fn closed_forms_are_bit_reproducible() {
        let five = FiniteInstance::five_by_three();
        let model = vec![vec![0.4; 3]; 5];
        assert_eq!(
            dr_closed_form_mse(&five, &model, 9).unwrap().to_bits(),
            dr_closed_form_mse(&five, &model, 9).unwrap().to_bits()
        );
        assert_eq!(
            switch_mse_bound(&five, &model, 2.0, 9).unwrap().to_bits(),
            switch_mse_bound(&five, &model, 2.0, 9).unwrap().to_bits()
        );
    }

    #[test]
    fn model_outside_range_is_rejected() {
        let five = FiniteInstance::five_by_three();
        assert!(InstanceBias::new(&five, &vec![vec![1.5; 3]; 5]).is_err());
        assert!(InstanceBias::new(&five, &vec![vec![0.5; 3]; 4]).is_err());
    }
}
