//! Replicated off-policy evaluation experiments on multiclass datasets.
//!
//! For every dataset, size and replicate the harness simulates one log,
//! runs every configured estimator on that same log, and records the
//! squared error against the exact target value, truncated at 1. Replicates
//! run in parallel; each draws from its own derived seed and results are
//! reduced in replicate order, so output files are byte-identical for any
//! worker count.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit_sim::{
    ground_truth_value, make_policies, shipped_synth_specs, simulate_log, size_schedule, MulticlassDataset, RewardChannel,
    SynthSpec,
};
use crate::domain::{BanditLog, Policy};
use crate::error::{Error, Result};
use crate::estimators::{WeightedLog, ESTIMATOR_NAMES};
use crate::reward_model::{cross_fit, train_reward_model, TrainerConfig};
use crate::seed::mix_seed;
use crate::tuning::{magic_weights, tuned_estimate, Tunable};

/// Schema tag every config file must carry.
pub const CONFIG_SCHEMA: &str = "ope-sweep/1";

/// Header of the results CSV.
pub const RESULTS_HEADER: [&str; 9] = [
    "dataset", "channel", "n", "estimator", "replicates", "mse_trunc", "rel_mse", "std_err", "tau_mean",
];

/// Estimators whose threshold can be tuned or chosen by the oracle.
pub const TUNABLE_NAMES: [&str; 4] = ["switch", "switch-dr", "trim-ips", "trun-ips"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SynthSpec),
    Csv {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    /// All ten shipped synthetic datasets.
    ShippedSynthetic,
}

fn default_replicates() -> usize {
    500
}

fn default_estimators() -> Vec<String> {
    ESTIMATOR_NAMES.iter().map(|s| s.to_string()).collect()
}

fn default_grid_size() -> usize {
    21
}

fn default_truncation() -> f64 {
    1.0
}

fn default_schema() -> String {
    CONFIG_SCHEMA.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub datasets: Vec<DatasetSource>,
    #[serde(default)]
    pub channel: RewardChannel,
    /// Sample sizes; when absent each dataset uses 100, 200, 500, ... up to
    /// its row count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<usize>>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<String>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    /// Also emit `<name>-oracle` rows for the tunable estimators.
    #[serde(default)]
    pub oracle_tau: bool,
    #[serde(default)]
    pub trainer: TrainerConfig,
    /// Squared errors are capped at this value before averaging.
    #[serde(default = "default_truncation")]
    pub truncation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(datasets: Vec<DatasetSource>) -> Self {
        Self {
            schema: default_schema(),
            datasets,
            channel: RewardChannel::default(),
            sizes: None,
            replicates: default_replicates(),
            estimators: default_estimators(),
            master_seed: 0,
            grid_size: default_grid_size(),
            oracle_tau: false,
            trainer: TrainerConfig::default(),
            truncation: default_truncation(),
            output: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "schema {:?} is not supported (expected {CONFIG_SCHEMA:?})",
                self.schema
            )));
        }
        if self.datasets.is_empty() {
            return Err(Error::Config("no datasets".into()));
        }
        if self.replicates < 1 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if let Some(sizes) = &self.sizes {
            if sizes.is_empty() || sizes.contains(&0) {
                return Err(Error::Config("sizes must be nonempty and positive".into()));
            }
            if sizes.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Config("sizes must be nondecreasing".into()));
            }
        }
        if self.grid_size < 1 {
            return Err(Error::Config("grid_size must be at least 1".into()));
        }
        if !(self.truncation > 0.0) {
            return Err(Error::Config("truncation must be positive".into()));
        }
        for name in &self.estimators {
            if !ESTIMATOR_NAMES.contains(&name.as_str()) {
                return Err(Error::Config(format!(
                    "unknown estimator {name:?}; known: {}",
                    ESTIMATOR_NAMES.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Loads or generates every dataset in order.
    pub fn load_datasets(&self) -> Result<Vec<MulticlassDataset>> {
        let mut out = Vec::new();
        for src in &self.datasets {
            match src {
                DatasetSource::Synthetic(spec) => out.push(spec.generate()?),
                DatasetSource::Csv { path, name } => {
                    let d = MulticlassDataset::load_csv(path)?;
                    out.push(match name {
                        Some(n) => d.with_name(n),
                        None => d,
                    });
                }
                DatasetSource::ShippedSynthetic => {
                    for spec in shipped_synth_specs() {
                        out.push(spec.generate()?);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Estimator names in output order; `ips` is always present.
    fn row_estimators(&self) -> Vec<String> {
        let mut names = Vec::new();
        if !self.estimators.iter().any(|e| e == "ips") {
            names.push("ips".to_string());
        }
        for e in &self.estimators {
            if !names.contains(e) {
                names.push(e.clone());
            }
        }
        names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub dataset: String,
    pub channel: String,
    pub n: usize,
    pub estimator: String,
    pub replicates: usize,
    pub mse_trunc: f64,
    pub rel_mse: f64,
    pub std_err: f64,
    pub tau_mean: Option<f64>,
}

/// Seed of one replicate.
pub fn replicate_seed(master: u64, dataset: usize, size: usize, replicate: usize) -> u64 {
    mix_seed(&[master, dataset as u64, size as u64, replicate as u64])
}

/// Seed for a dataset's policy construction.
pub fn policy_seed(master: u64, dataset: usize) -> u64 {
    mix_seed(&[master, dataset as u64, u64::MAX])
}

/// Mean and standard error of squared errors each capped at `cap`.
pub fn truncated_mse(errors: &[f64], cap: f64) -> (f64, f64) {
    let sq: Vec<f64> = errors.iter().map(|e| (e * e).min(cap)).collect();
    mean_and_se(&sq)
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
    (mean, (var / r).sqrt())
}

fn relative(mse: f64, ips: f64) -> f64 {
    if mse == ips {
        1.0
    } else {
        mse / ips
    }
}

/// Estimates from one simulated log.
#[derive(Debug, Clone)]
struct ReplicateOutcome {
    /// Estimate per row estimator.
    values: Vec<f64>,
    /// Chosen τ per row estimator, when tuned.
    taus: Vec<Option<f64>>,
    /// Threshold grid of this log.
    grid: Vec<f64>,
    /// Estimate per grid τ, per tunable estimator (empty unless oracle mode).
    oracle: Vec<Vec<f64>>,
}

fn degenerate_to_zero(r: Result<f64>, warned: &mut bool) -> Result<f64> {
    match r {
        Err(Error::DegenerateNormalizer) => {
            *warned = true;
            Ok(0.0)
        }
        other => other,
    }
}

struct DatasetContext<'a> {
    config: &'a ExperimentConfig,
    target: &'a dyn Policy,
    logging: &'a dyn Policy,
    names: &'a [String],
}

impl DatasetContext<'_> {
    fn run_replicate(&self, log: &BanditLog, seed: u64) -> Result<ReplicateOutcome> {
        let cfg = self.config;
        let w = WeightedLog::new(log, self.target, Some(self.logging))?;
        let needs_full = self.names.iter().any(|n| ["dm", "switch", "switch-dr", "magic"].contains(&n.as_str()));
        let needs_cross = self.names.iter().any(|n| n == "dr" || n == "switch-dr");
        let needs_grid = self.names.iter().any(|n| TUNABLE_NAMES.contains(&n.as_str()) || n == "magic");

        let full = if needs_full || needs_cross {
            Some(w.predictions(&train_reward_model(log, &cfg.trainer)?)?)
        } else {
            None
        };
        let pair = if needs_cross {
            Some(cross_fit(log, &cfg.trainer, mix_seed(&[seed, 1]))?)
        } else {
            None
        };
        let routed = match &pair {
            Some(p) => Some(w.predictions(&p.routed())?),
            None => None,
        };
        let grid = if needs_grid { w.threshold_grid(cfg.grid_size)? } else { Vec::new() };
        let caps = w.action_table(|_, _, _| 1.0);

        let tunable = |name: &str| -> Option<Tunable<'_>> {
            match name {
                "switch" => Some(Tunable::Switch {
                    impute: full.as_ref().expect("trained"),
                }),
                "switch-dr" => Some(Tunable::SwitchDr {
                    dr: routed.as_ref().expect("trained"),
                    impute: full.as_ref().expect("trained"),
                }),
                "trim-ips" => Some(Tunable::TrimIps),
                "trun-ips" => Some(Tunable::TrunIps),
                _ => None,
            }
        };

        let mut warned = false;
        let mut values = Vec::with_capacity(self.names.len());
        let mut taus = Vec::with_capacity(self.names.len());
        for name in self.names {
            let (v, tau) = match name.as_str() {
                "ips" => (w.ips(), None),
                "dm" => (w.dm(full.as_ref().expect("trained")), None),
                "dr" => (pair.as_ref().expect("trained").dr_estimate(log, self.target)?, None),
                "magic" => {
                    let per_tau = grid
                        .iter()
                        .map(|&t| w.switch_values(full.as_ref().expect("trained"), t))
                        .collect::<Result<Vec<_>>>()?;
                    (magic_weights(&per_tau)?.value, None)
                }
                other => {
                    let est = tunable(other).expect("validated estimator name");
                    match tuned_estimate(&w, est, &caps, &grid) {
                        Ok((report, _)) => (report.value, report.tau),
                        Err(Error::DegenerateNormalizer) => {
                            warned = true;
                            (0.0, Some(grid[0]))
                        }
                        Err(e) => return Err(e),
                    }
                }
            };
            values.push(v);
            taus.push(tau);
        }

        let mut oracle = Vec::new();
        if cfg.oracle_tau {
            for name in TUNABLE_NAMES {
                if !self.names.iter().any(|n| n == name) {
                    continue;
                }
                let est = tunable(name).expect("tunable name");
                let mut per_tau = Vec::with_capacity(grid.len());
                for &t in &grid {
                    per_tau.push(degenerate_to_zero(est.estimate(&w, t), &mut warned)?);
                }
                oracle.push(per_tau);
            }
        }
        if warned {
            warn!("zero truncated-IPS normalizer on replicate with seed {seed:#018x}; estimate set to 0");
        }
        Ok(ReplicateOutcome {
            values,
            taus,
            grid,
            oracle,
        })
    }
}

/// Runs the full replicate loop. Oracle rows are appended when the config
/// asks for them.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let datasets = config.load_datasets()?;
    let names = config.row_estimators();
    let oracle_names: Vec<&str> = TUNABLE_NAMES
        .iter()
        .copied()
        .filter(|t| names.iter().any(|n| n == t))
        .collect();
    let mut rows = Vec::new();
    for (d_idx, data) in datasets.iter().enumerate() {
        let (target, logging) = make_policies(data, &config.trainer, policy_seed(config.master_seed, d_idx))?;
        let truth = ground_truth_value(data, &target, config.channel)?;
        let sizes = config.sizes.clone().unwrap_or_else(|| size_schedule(data.len()));
        info!("{}: N={}, K={}, value {truth:.6}, sizes {sizes:?}", data.name(), data.len(), data.num_classes());
        let ctx = DatasetContext {
            config,
            target: &target,
            logging: &logging,
            names: &names,
        };
        for (s_idx, &n) in sizes.iter().enumerate() {
            let outcomes: Vec<ReplicateOutcome> = (0..config.replicates)
                .into_par_iter()
                .map(|r| {
                    let seed = replicate_seed(config.master_seed, d_idx, s_idx, r);
                    let wrap = |source: Error| Error::Replicate {
                        dataset: data.name().to_string(),
                        n,
                        replicate: r,
                        seed,
                        source: Box::new(source),
                    };
                    let log = simulate_log(data, &logging, config.channel, n, seed).map_err(wrap)?;
                    ctx.run_replicate(&log, seed).map_err(wrap)
                })
                .collect::<Result<_>>()?;
            let reps = outcomes.len();
            let errors = |j: usize| -> Vec<f64> { outcomes.iter().map(|o| o.values[j] - truth).collect() };
            let ips_idx = names.iter().position(|n| n == "ips").expect("ips always present");
            let (ips_mse, _) = truncated_mse(&errors(ips_idx), config.truncation);
            let row = |estimator: String, mse: f64, se: f64, tau_mean: Option<f64>| ResultRow {
                dataset: data.name().to_string(),
                channel: config.channel.name().to_string(),
                n,
                estimator,
                replicates: reps,
                mse_trunc: mse,
                rel_mse: relative(mse, ips_mse),
                std_err: se,
                tau_mean,
            };
            for (j, name) in names.iter().enumerate() {
                let (mse, se) = truncated_mse(&errors(j), config.truncation);
                let tau_mean = if outcomes[0].taus[j].is_some() {
                    Some(outcomes.iter().map(|o| o.taus[j].expect("tuned")).sum::<f64>() / reps as f64)
                } else {
                    None
                };
                rows.push(row(name.clone(), mse, se, tau_mean));
            }
            if config.oracle_tau {
                for (f, name) in oracle_names.iter().enumerate() {
                    let (j, mse, se) = oracle_choice(&outcomes, f, truth, config.truncation);
                    let tau_mean = outcomes.iter().map(|o| o.grid[j]).sum::<f64>() / reps as f64;
                    rows.push(row(format!("{name}-oracle"), mse, se, Some(tau_mean)));
                }
            }
        }
    }
    Ok(rows)
}

/// Grid index with the smallest truncated MSE across replicates; ties go to
/// the smallest index.
fn oracle_choice(outcomes: &[ReplicateOutcome], family: usize, truth: f64, cap: f64) -> (usize, f64, f64) {
    let grid_len = outcomes[0].oracle[family].len();
    let mut best: Option<(usize, f64, f64)> = None;
    for j in 0..grid_len {
        let errs: Vec<f64> = outcomes.iter().map(|o| o.oracle[family][j] - truth).collect();
        let (mse, se) = truncated_mse(&errs, cap);
        if best.is_none_or(|(_, m, _)| mse < m) {
            best = Some((j, mse, se));
        }
    }
    best.expect("nonempty grid")
}

/// Oracle-τ rows only.
pub fn run_oracle_tau(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let mut cfg = config.clone();
    cfg.oracle_tau = true;
    Ok(run_experiment(&cfg)?
        .into_iter()
        .filter(|r| r.estimator.ends_with("-oracle"))
        .collect())
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn write_results_csv(rows: &[ResultRow], writer: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Domain(format!("writing results: {e}"));
    w.write_record(RESULTS_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.channel.clone(),
            r.n.to_string(),
            r.estimator.clone(),
            r.replicates.to_string(),
            fmt_f64(r.mse_trunc),
            fmt_f64(r.rel_mse),
            fmt_f64(r.std_err),
            r.tau_mean.map(fmt_f64).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<results>", e))?;
    Ok(())
}

/// Parses a results CSV written by [`write_results_csv`].
pub fn read_results_csv(reader: impl std::io::Read) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    if header.iter().ne(RESULTS_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let num = |j: usize| -> Result<f64> {
            rec[j].parse().map_err(|e| Error::Parse {
                line,
                message: format!("{}: {e}", RESULTS_HEADER[j]),
            })
        };
        let int = |j: usize| -> Result<usize> {
            rec[j].parse().map_err(|e| Error::Parse {
                line,
                message: format!("{}: {e}", RESULTS_HEADER[j]),
            })
        };
        rows.push(ResultRow {
            dataset: rec[0].to_string(),
            channel: rec[1].to_string(),
            n: int(2)?,
            estimator: rec[3].to_string(),
            replicates: int(4)?,
            mse_trunc: num(5)?,
            rel_mse: num(6)?,
            std_err: num(7)?,
            tau_mean: if rec[8].is_empty() { None } else { Some(num(8)?) },
        });
    }
    Ok(rows)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    generator: &'static str,
    version: &'static str,
    truncation: f64,
    config: &'a ExperimentConfig,
}

/// Path of the metadata file written next to a results file.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes the results CSV and a `.meta.json` sidecar echoing the config.
pub fn write_outputs(rows: &[ResultRow], config: &ExperimentConfig, out: &Path) -> Result<()> {
    let file = std::fs::File::create(out).map_err(|e| Error::io(out, e))?;
    write_results_csv(rows, std::io::BufWriter::new(file))?;
    let meta = Sidecar {
        generator: "ope",
        version: env!("CARGO_PKG_VERSION"),
        truncation: config.truncation,
        config,
    };
    let side = sidecar_path(out);
    let text = serde_json::to_string_pretty(&meta).expect("sidecar serializes") + "\n";
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

/// Worker count from `OPE_WORKERS`, if set.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var("OPE_WORKERS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("OPE_WORKERS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs `f` on a pool of `workers` threads, or on the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}
