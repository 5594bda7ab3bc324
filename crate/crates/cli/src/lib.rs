//! Argument parsing and dispatch for the `ope` binary.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use ope_core::bandit_sim::{make_policies, shipped_synth_specs, simulate_log, synth_dataset, MulticlassDataset, RewardChannel};
use ope_core::domain::{validate_log, BanditLog, Policy};
use ope_core::estimators::{WeightedLog, ESTIMATOR_NAMES};
use ope_core::harness::{run_experiment, with_workers, workers_from_env, write_outputs, ExperimentConfig};
use ope_core::reward_model::{cross_fit, train_reward_model, ArgmaxPolicy, LogisticModel, SoftmaxPolicy, TrainerConfig};
use ope_core::theory_check::{run_theory_checks, TheoryCheckConfig};
use ope_core::tuning::{magic_weights, tuned_estimate, Tunable, TuningTrace};
use ope_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "ope", version, about = "Off-policy evaluation for contextual bandits")]
pub struct Cli {
    /// Seed for all randomness (overrides the config's master seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output path; stdout when omitted and the command allows it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a bandit log from a multiclass dataset. Also writes the
    /// target and logging policy models next to the log.
    Simulate {
        /// Dataset CSV (`f0,...,f{d-1},label`).
        #[arg(long, conflicts_with = "synthetic")]
        data: Option<PathBuf>,
        /// Name of a shipped synthetic dataset (synth-01 ... synth-10).
        #[arg(long)]
        synthetic: Option<String>,
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value_t = Channel::Noisy)]
        channel: Channel,
    },
    /// Estimate the target policy's value from a log.
    Evaluate {
        #[arg(long)]
        log: PathBuf,
        /// Target policy model file.
        #[arg(long)]
        target: PathBuf,
        /// Logging policy model file (needed for threshold-based estimators).
        #[arg(long)]
        logging: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PolicyKind::Argmax)]
        target_kind: PolicyKind,
        #[arg(long)]
        estimator: String,
        /// `auto` or a fixed threshold.
        #[arg(long, default_value = "auto")]
        tau: String,
        #[arg(long, default_value_t = 21)]
        grid_size: usize,
    },
    /// Run a replicated experiment from a config and write a results CSV.
    Sweep,
    /// Check closed-form risks and bounds against Monte-Carlo estimates.
    TheoryCheck {
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Write a synthetic multiclass dataset as CSV.
    Synth {
        /// A shipped dataset name; otherwise the shape flags below apply.
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 2.0)]
        separation: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Channel {
    Deterministic,
    Noisy,
}

impl From<Channel> for RewardChannel {
    fn from(c: Channel) -> Self {
        match c {
            Channel::Deterministic => RewardChannel::Deterministic,
            Channel::Noisy => RewardChannel::Noisy,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyKind {
    /// Point mass on the most probable class.
    Argmax,
    /// The model's softmax probabilities.
    Softmax,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 on success, 1 for invalid input, 2 when
/// a computation fails.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            if is_validation(&e) {
                1
            } else {
                2
            }
        }
    }
}

fn is_validation(e: &Error) -> bool {
    match e {
        Error::Replicate { source, .. } => is_validation(source),
        other => other.is_validation(),
    }
}

fn run(cli: Cli) -> Result<()> {
    let workers = workers_from_env()?;
    match cli.command {
        Command::Simulate {
            data,
            synthetic,
            n,
            channel,
        } => simulate(data, synthetic, n, channel.into(), cli.seed.unwrap_or(0), cli.out, cli.config),
        Command::Evaluate {
            log,
            target,
            logging,
            target_kind,
            estimator,
            tau,
            grid_size,
        } => {
            let req = EvalRequest {
                log,
                target,
                logging,
                target_kind,
                estimator,
                tau,
                grid_size,
                seed: cli.seed.unwrap_or(0),
                trainer: trainer_from(cli.config.as_deref())?,
            };
            let text = evaluate(&req)?;
            emit(cli.out.as_deref(), &text)
        }
        Command::Sweep => {
            let path = cli
                .config
                .ok_or_else(|| Error::Config("sweep needs --config <file>".into()))?;
            let mut config = ExperimentConfig::load(&path)?;
            if let Some(seed) = cli.seed {
                config.master_seed = seed;
            }
            let out = cli
                .out
                .or_else(|| config.output.clone())
                .ok_or_else(|| Error::Config("sweep needs --out or an `output` entry in the config".into()))?;
            let rows = with_workers(workers, || run_experiment(&config))??;
            write_outputs(&rows, &config, &out)?;
            info!("wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
        Command::TheoryCheck { replicates } => {
            let mut config = match &cli.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => TheoryCheckConfig::default(),
            };
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            if let Some(r) = replicates {
                config.replicates = r;
            }
            let report = with_workers(workers, || run_theory_checks(&config))??;
            let passed = report.checks.iter().filter(|c| c.passed).count();
            eprintln!("{passed}/{} checks passed", report.checks.len());
            let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            emit(cli.out.as_deref(), &text)
        }
        Command::Synth {
            name,
            classes,
            dim,
            per_class,
            separation,
        } => {
            let data = match name {
                Some(name) => shipped(&name)?,
                None => synth_dataset(classes, dim, per_class, separation, cli.seed.unwrap_or(0))?,
            };
            let out = cli.out.ok_or_else(|| Error::Config("synth needs --out <file.csv>".into()))?;
            data.save_csv(&out)
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| io_err(p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| io_err(Path::new("<stdout>"), e)),
    }
}

fn trainer_from(config: Option<&Path>) -> Result<TrainerConfig> {
    match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
        None => Ok(TrainerConfig::default()),
    }
}

fn shipped(name: &str) -> Result<MulticlassDataset> {
    shipped_synth_specs()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Config(format!("no shipped dataset named {name:?}")))?
        .generate()
}

/// Paths of the policy models written next to a simulated log.
pub fn model_paths(log_path: &Path) -> (PathBuf, PathBuf) {
    let with = |suffix: &str| {
        let mut s = log_path.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    (with(".target.model"), with(".logging.model"))
}

fn simulate(
    data: Option<PathBuf>,
    synthetic: Option<String>,
    n: usize,
    channel: RewardChannel,
    seed: u64,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
) -> Result<()> {
    let dataset = match (data, synthetic) {
        (Some(path), None) => MulticlassDataset::load_csv(path)?,
        (None, Some(name)) => shipped(&name)?,
        _ => return Err(Error::Config("simulate needs exactly one of --data or --synthetic".into())),
    };
    let out = out.ok_or_else(|| Error::Config("simulate needs --out <log.jsonl>".into()))?;
    let trainer = trainer_from(config.as_deref())?;
    let (target, logging) = make_policies(&dataset, &trainer, seed)?;
    let log = simulate_log(&dataset, &logging, channel, n, seed)?;
    log.save(&out)?;
    let (tp, lp) = model_paths(&out);
    target.0.save(&tp)?;
    logging.0.save(&lp)?;
    info!("wrote {n} records to {}", out.display());
    Ok(())
}

pub struct EvalRequest {
    pub log: PathBuf,
    pub target: PathBuf,
    pub logging: Option<PathBuf>,
    pub target_kind: PolicyKind,
    pub estimator: String,
    pub tau: String,
    pub grid_size: usize,
    pub seed: u64,
    pub trainer: TrainerConfig,
}

fn trace_summary(trace: &TuningTrace) -> serde_json::Value {
    json!({
        "chosen_tau": trace.chosen_tau(),
        "chosen_index": trace.chosen_index,
        "chosen_objective": trace.chosen_objective(),
        "taus": trace.taus,
        "var_hats": trace.var_hats,
        "bias_bounds_sq": trace.bias_bounds_sq,
        "objective": trace.objective,
    })
}

/// Runs one estimator on a saved log and renders the result as JSON.
pub fn evaluate(req: &EvalRequest) -> Result<String> {
    if !ESTIMATOR_NAMES.contains(&req.estimator.as_str()) {
        return Err(Error::Config(format!(
            "unknown estimator {:?}; known: {}",
            req.estimator,
            ESTIMATOR_NAMES.join(", ")
        )));
    }
    let log = BanditLog::load(&req.log)?;
    let model = LogisticModel::load(&req.target)?;
    let target: Box<dyn Policy> = match req.target_kind {
        PolicyKind::Argmax => Box::new(ArgmaxPolicy(model)),
        PolicyKind::Softmax => Box::new(SoftmaxPolicy(model)),
    };
    let logging = match &req.logging {
        Some(p) => Some(SoftmaxPolicy(LogisticModel::load(p)?)),
        None => None,
    };
    let report = validate_log(&log, &target, logging.as_ref().map(|l| l as &dyn Policy));
    if !report.is_clean() {
        return Err(Error::Config(format!(
            "log fails validation: {} violation(s), first: {:?}",
            report.violations.len(),
            report.violations[0]
        )));
    }
    let needs_logging = !matches!(req.estimator.as_str(), "ips" | "dm" | "dr" | "trun-ips");
    if needs_logging && logging.is_none() {
        return Err(Error::Config(format!("{} needs --logging <model>", req.estimator)));
    }
    let w = WeightedLog::new(&log, &target, logging.as_ref().map(|l| l as &dyn Policy))?;
    let fixed_tau = match req.tau.as_str() {
        "auto" => None,
        s => Some(
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("--tau must be `auto` or a number, got {s:?}")))?,
        ),
    };
    let needs_full = matches!(req.estimator.as_str(), "dm" | "switch" | "switch-dr" | "magic");
    let full = if needs_full {
        Some(w.predictions(&train_reward_model(&log, &req.trainer)?)?)
    } else {
        None
    };
    let pair = if matches!(req.estimator.as_str(), "dr" | "switch-dr") {
        Some(cross_fit(&log, &req.trainer, req.seed)?)
    } else {
        None
    };
    let routed = match &pair {
        Some(p) => Some(w.predictions(&p.routed())?),
        None => None,
    };
    let caps = w.action_table(|_, _, _| 1.0);
    let grid = || w.threshold_grid(req.grid_size);

    let tunable = match req.estimator.as_str() {
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
    };
    let mut out = json!({ "estimator": req.estimator, "n": log.len() });
    match (tunable, fixed_tau) {
        (Some(t), None) => {
            let (report, trace) = tuned_estimate(&w, t, &caps, &grid()?)?;
            out["report"] = serde_json::to_value(report).expect("report serializes");
            out["tuning"] = trace_summary(&trace);
        }
        (Some(t), Some(tau)) => {
            out["report"] = json!({ "value": t.estimate(&w, tau)?, "tau": tau });
        }
        (None, _) => {
            let value = match req.estimator.as_str() {
                "ips" => w.ips(),
                "dm" => w.dm(full.as_ref().expect("trained")),
                "dr" => pair.as_ref().expect("trained").dr_estimate(&log, &target)?,
                "magic" => {
                    let taus = grid()?;
                    let per_tau = taus
                        .iter()
                        .map(|&t| w.switch_values(full.as_ref().expect("trained"), t))
                        .collect::<Result<Vec<_>>>()?;
                    let fit = magic_weights(&per_tau)?;
                    out["magic"] = json!({ "taus": taus, "weights": fit.weights, "estimates": fit.estimates });
                    fit.value
                }
                _ => unreachable!("validated name"),
            };
            out["report"] = json!({ "value": value });
        }
    }
    Ok(serde_json::to_string_pretty(&out).expect("json") + "\n")
}
