//! Fully specified finite contextual-bandit problems.
//!
//! A [`FiniteInstance`] lists every context probability, both policies and
//! the reward moments as tables, so policy values, importance-weight moments
//! and risk expressions can be computed by exact summation.

use serde::{Deserialize, Serialize};

use crate::domain::{check_distribution, importance_weight, TabularPolicy};
use crate::error::{Error, Result};

/// How rewards are drawn around their mean when simulating an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardNoise {
    /// `Normal(mean, noise_sd²)`.
    #[default]
    Gaussian,
    /// `reward_cap · Bernoulli(mean / reward_cap)`; `noise_sd` is ignored.
    ScaledBernoulli,
}

/// Which policy of an instance to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Target,
    Logging,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteInstance {
    pub context_probs: Vec<f64>,
    pub logging: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
    pub mean_reward: Vec<Vec<f64>>,
    pub noise_sd: Vec<Vec<f64>>,
    pub reward_cap: Vec<Vec<f64>>,
    #[serde(default)]
    pub noise: RewardNoise,
}

fn check_shape(name: &str, t: &[Vec<f64>], m: usize, k: usize) -> Result<()> {
    if t.len() != m || t.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidInstance(format!("{name} must be {m}x{k}")));
    }
    if t.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInstance(format!("{name} has non-finite entries")));
    }
    Ok(())
}

impl FiniteInstance {
    pub fn new(
        context_probs: Vec<f64>,
        logging: Vec<Vec<f64>>,
        target: Vec<Vec<f64>>,
        mean_reward: Vec<Vec<f64>>,
        noise_sd: Vec<Vec<f64>>,
        reward_cap: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let inst = Self {
            context_probs,
            logging,
            target,
            mean_reward,
            noise_sd,
            reward_cap,
            noise: RewardNoise::Gaussian,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn with_noise(mut self, noise: RewardNoise) -> Self {
        self.noise = noise;
        self
    }

    /// Checks every table invariant; called by [`FiniteInstance::new`] and
    /// after deserialization.
    pub fn validate(&self) -> Result<()> {
        let m = self.context_probs.len();
        if m == 0 {
            return Err(Error::InvalidInstance("no contexts".into()));
        }
        let k = self.logging.first().map_or(0, Vec::len);
        if k == 0 {
            return Err(Error::InvalidInstance("no actions".into()));
        }
        check_distribution(&self.context_probs, m)
            .map_err(|e| Error::InvalidInstance(format!("context_probs: {e}")))?;
        for (name, t) in [
            ("logging", &self.logging),
            ("target", &self.target),
            ("mean_reward", &self.mean_reward),
            ("noise_sd", &self.noise_sd),
            ("reward_cap", &self.reward_cap),
        ] {
            check_shape(name, t, m, k)?;
        }
        for x in 0..m {
            check_distribution(&self.logging[x], k)
                .map_err(|e| Error::InvalidInstance(format!("logging row {x}: {e}")))?;
            check_distribution(&self.target[x], k)
                .map_err(|e| Error::InvalidInstance(format!("target row {x}: {e}")))?;
            for a in 0..k {
                let (r, cap) = (self.mean_reward[x][a], self.reward_cap[x][a]);
                if !(0.0 <= r && r <= cap) {
                    return Err(Error::InvalidInstance(format!(
                        "mean_reward[{x}][{a}] = {r} outside [0, {cap}]"
                    )));
                }
                if self.noise_sd[x][a] < 0.0 {
                    return Err(Error::InvalidInstance(format!("noise_sd[{x}][{a}] negative")));
                }
                if self.target[x][a] > 0.0 && self.logging[x][a] == 0.0 {
                    return Err(Error::InvalidInstance(format!(
                        "absolute continuity fails at ({x}, {a})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_contexts(&self) -> usize {
        self.context_probs.len()
    }

    pub fn num_actions(&self) -> usize {
        self.logging[0].len()
    }

    /// ρ(x, a) = π(a|x) / μ(a|x) with 0/0 = 0.
    pub fn rho(&self, x: usize, a: usize) -> f64 {
        importance_weight(self.target[x][a], self.logging[x][a])
            .expect("absolute continuity checked at construction")
    }

    pub fn rho_table(&self) -> Vec<Vec<f64>> {
        (0..self.num_contexts())
            .map(|x| (0..self.num_actions()).map(|a| self.rho(x, a)).collect())
            .collect()
    }

    /// Joint point mass λ(x)·μ(a|x).
    pub fn joint_mass(&self, x: usize, a: usize) -> f64 {
        self.context_probs[x] * self.logging[x][a]
    }

    /// E_μ[f(x, a)] with x ~ λ, a ~ μ(·|x), by exact summation.
    pub fn expect_logging(&self, mut f: impl FnMut(usize, usize) -> f64) -> f64 {
        let mut total = 0.0;
        for x in 0..self.num_contexts() {
            let mut inner = 0.0;
            for a in 0..self.num_actions() {
                let w = self.logging[x][a];
                if w > 0.0 {
                    inner += w * f(x, a);
                }
            }
            total += self.context_probs[x] * inner;
        }
        total
    }

    /// E_π[f(x, a)] with x ~ λ, a ~ π(·|x).
    pub fn expect_target(&self, mut f: impl FnMut(usize, usize) -> f64) -> f64 {
        let mut total = 0.0;
        for x in 0..self.num_contexts() {
            let mut inner = 0.0;
            for a in 0..self.num_actions() {
                let w = self.target[x][a];
                if w > 0.0 {
                    inner += w * f(x, a);
                }
            }
            total += self.context_probs[x] * inner;
        }
        total
    }

    /// Largest importance weight over all pairs.
    pub fn max_rho(&self) -> f64 {
        self.rho_table().into_iter().flatten().fold(0.0, f64::max)
    }

    pub fn target_policy(&self) -> TabularPolicy {
        TabularPolicy::new(self.target.clone()).expect("validated rows")
    }

    pub fn logging_policy(&self) -> TabularPolicy {
        TabularPolicy::new(self.logging.clone()).expect("validated rows")
    }

    /// Same instance with the mean-reward table replaced.
    pub fn with_mean_reward(&self, mean_reward: Vec<Vec<f64>>) -> Result<Self> {
        let inst = Self {
            mean_reward,
            ..self.clone()
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let inst: Self = serde_json::from_str(text).map_err(|e| Error::InvalidInstance(e.to_string()))?;
        inst.validate()?;
        Ok(inst)
    }

    /// Five contexts, three actions, with a target policy concentrated on
    /// actions the logging policy rarely takes. Used throughout the
    /// verification suite.
    pub fn five_by_three() -> Self {
        Self::new(
            vec![0.3, 0.25, 0.2, 0.15, 0.1],
            vec![
                vec![0.6, 0.3, 0.1],
                vec![0.2, 0.5, 0.3],
                vec![0.7, 0.2, 0.1],
                vec![0.1, 0.1, 0.8],
                vec![0.4, 0.4, 0.2],
            ],
            vec![
                vec![0.1, 0.2, 0.7],
                vec![0.5, 0.0, 0.5],
                vec![0.0, 0.3, 0.7],
                vec![0.8, 0.2, 0.0],
                vec![0.2, 0.2, 0.6],
            ],
            vec![
                vec![0.2, 0.5, 0.9],
                vec![0.7, 0.4, 0.1],
                vec![0.3, 0.6, 0.8],
                vec![0.9, 0.2, 0.5],
                vec![0.4, 0.4, 0.6],
            ],
            vec![
                vec![0.3, 0.5, 0.4],
                vec![0.2, 0.6, 0.3],
                vec![0.5, 0.3, 0.4],
                vec![0.4, 0.2, 0.6],
                vec![0.3, 0.3, 0.3],
            ],
            vec![vec![1.0; 3]; 5],
        )
        .expect("shipped instance is valid")
    }

    /// Four contexts, three actions, including a deterministic target row.
    pub fn four_by_three() -> Self {
        Self::new(
            vec![0.4, 0.3, 0.2, 0.1],
            vec![
                vec![0.5, 0.3, 0.2],
                vec![0.05, 0.15, 0.8],
                vec![0.3, 0.3, 0.4],
                vec![0.1, 0.6, 0.3],
            ],
            vec![
                vec![0.0, 0.0, 1.0],
                vec![0.7, 0.3, 0.0],
                vec![0.2, 0.3, 0.5],
                vec![0.9, 0.0, 0.1],
            ],
            vec![
                vec![0.3, 0.6, 0.8],
                vec![0.9, 0.5, 0.2],
                vec![0.4, 0.4, 0.7],
                vec![0.6, 0.1, 0.3],
            ],
            vec![
                vec![0.5, 0.5, 0.5],
                vec![0.4, 0.6, 0.2],
                vec![0.3, 0.3, 0.3],
                vec![0.5, 0.2, 0.4],
            ],
            vec![vec![1.0; 3]; 4],
        )
        .expect("shipped instance is valid")
    }
}

/// Exact value Σ_x λ(x) Σ_a policy(a|x) r*(x, a) of the target or logging
/// policy.
pub fn policy_value_exact(instance: &FiniteInstance, which: Which) -> f64 {
    let policy = match which {
        Which::Target => &instance.target,
        Which::Logging => &instance.logging,
    };
    let mut total = 0.0;
    for (x, &lambda) in instance.context_probs.iter().enumerate() {
        let inner: f64 = policy[x]
            .iter()
            .zip(&instance.mean_reward[x])
            .map(|(p, r)| p * r)
            .sum();
        total += lambda * inner;
    }
    total
}
