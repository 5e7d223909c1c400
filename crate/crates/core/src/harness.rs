//! Experiment plumbing behind the `rebel` binary: TOML configs, training runs
//! with on-disk artifacts, comparisons, sweeps and the verification battery.
//!
//! A config looks like
//!
//! ```toml
//! env = "../envs/canonical.toml"   # relative to the config file
//! seed = 0
//! iterations = 100
//! batch_size = 64
//! gamma = 0.0
//! out = "runs/rebel"
//!
//! [algo]
//! name = "rebel"
//! eta = 1.0
//! solver = "exact"
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineAlgo, BaselineConfig, BaselineUpdate};
use crate::env::ContextualBandit;
use crate::numerics::{seeded_rng, SeededRng};
use crate::policy::SoftmaxPolicy;
use crate::regression::{run_rebel, BaseDistribution, RebelConfig, RebelUpdate, Solver};
use crate::run::{evaluate, PolicyEval, PolicyUpdate, RunRecord, Runner};
use crate::selfplay::{duality_gap, PreferenceFeedback, SpoConfig, SpoUpdate};
use crate::theory::{self, CheckResult, ClaimInstance, GaussNewtonFn, RegressionStep};
use crate::{Error, Result, Table};

fn default_eta() -> f64 {
    1.0
}

fn default_spo_eta() -> f64 {
    SpoConfig::default().eta
}

fn default_gd_steps() -> usize {
    200
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    Exact,
    Gd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    #[default]
    OnPolicy,
    Offline,
    BestOfN,
    WorstOfN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    #[default]
    Exact,
    Binary,
}

/// Regression settings shared by `rebel` and `spo_rebel`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionParams {
    #[serde(default)]
    pub solver: SolverKind,
    #[serde(default = "default_gd_steps")]
    pub gd_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gd_step_size: Option<f64>,
    #[serde(default)]
    pub base: BaseKind,
    /// `N` of best/worst-of-N.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

impl RegressionParams {
    fn solver(&self) -> Solver {
        match self.solver {
            SolverKind::Exact => Solver::ExactTabular,
            SolverKind::Gd => Solver::GradDescent {
                steps: self.gd_steps,
                step_size: self.gd_step_size,
            },
        }
    }

    fn base(&self) -> Result<BaseDistribution> {
        let n = || {
            self.n
                .ok_or_else(|| Error::InvalidConfig("best_of_n/worst_of_n needs `n`".into()))
        };
        Ok(match self.base {
            BaseKind::OnPolicy => BaseDistribution::OnPolicy,
            BaseKind::Offline => BaseDistribution::OfflineFixed,
            BaseKind::BestOfN => BaseDistribution::BestOfN(n()?),
            BaseKind::WorstOfN => BaseDistribution::WorstOfN(n()?),
        })
    }
}

/// The `[algo]` table. `eta` is the step size of every method: the mirror
/// descent step for rebel/md/npg/spo_rebel, the learning rate otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum AlgoSpec {
    Rebel {
        #[serde(default = "default_eta")]
        eta: f64,
        #[serde(flatten)]
        regression: RegressionParams,
    },
    Md {
        #[serde(default = "default_eta")]
        eta: f64,
    },
    Npg {
        #[serde(default = "default_eta")]
        eta: f64,
        #[serde(default)]
        population: bool,
    },
    Reinforce {
        #[serde(default = "default_eta")]
        eta: f64,
    },
    Rloo {
        #[serde(default = "default_eta")]
        eta: f64,
        k: usize,
    },
    PpoClip {
        #[serde(default = "default_eta")]
        eta: f64,
        epsilon: f64,
        inner_steps: usize,
    },
    IterDpo {
        #[serde(default = "default_eta")]
        eta: f64,
        beta: f64,
        steps: usize,
    },
    SpoRebel {
        #[serde(default = "default_spo_eta")]
        eta: f64,
        #[serde(default)]
        feedback: FeedbackKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        opponent_samples: Option<usize>,
        #[serde(flatten)]
        regression: RegressionParams,
    },
}

pub const ALGORITHMS: [&str; 8] = [
    "rebel",
    "md",
    "npg",
    "reinforce",
    "rloo",
    "ppo_clip",
    "iter_dpo",
    "spo_rebel",
];

impl AlgoSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AlgoSpec::Rebel { .. } => "rebel",
            AlgoSpec::Md { .. } => "md",
            AlgoSpec::Npg { .. } => "npg",
            AlgoSpec::Reinforce { .. } => "reinforce",
            AlgoSpec::Rloo { .. } => "rloo",
            AlgoSpec::PpoClip { .. } => "ppo_clip",
            AlgoSpec::IterDpo { .. } => "iter_dpo",
            AlgoSpec::SpoRebel { .. } => "spo_rebel",
        }
    }

    pub fn eta(&self) -> f64 {
        match *self {
            AlgoSpec::Rebel { eta, .. }
            | AlgoSpec::Md { eta }
            | AlgoSpec::Npg { eta, .. }
            | AlgoSpec::Reinforce { eta }
            | AlgoSpec::Rloo { eta, .. }
            | AlgoSpec::PpoClip { eta, .. }
            | AlgoSpec::IterDpo { eta, .. }
            | AlgoSpec::SpoRebel { eta, .. } => eta,
        }
    }

    /// Default parameters for `name`, used by `--algo`.
    pub fn default_for(name: &str) -> Result<Self> {
        let extra = match name {
            "rloo" => "k = 4",
            "ppo_clip" => "eta = 0.5\nepsilon = 0.2\ninner_steps = 4",
            "iter_dpo" => "eta = 0.5\nbeta = 1.0\nsteps = 20",
            other if ALGORITHMS.contains(&other) => "",
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown algorithm `{other}` (expected one of {})",
                    ALGORITHMS.join(", ")
                )))
            }
        };
        Ok(toml::from_str(&format!("name = \"{name}\"\n{extra}"))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub algo: AlgoSpec,
}

fn default_batch() -> usize {
    64
}

/// What a config turns into: an updater bound to its settings.
pub enum Algorithm {
    Rebel(RebelConfig),
    Baseline(BaselineConfig),
    Spo(SpoConfig),
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text)?;
        Self::from_table(raw)
    }

    /// Deserializes and rejects `[algo]` keys the algorithm does not read.
    fn from_table(raw: toml::Table) -> Result<Self> {
        let config: Self = raw.clone().try_into()?;
        let parsed = toml::Table::try_from(&config).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let keys = |t: &toml::Table| -> Vec<String> {
            t.get("algo")
                .and_then(toml::Value::as_table)
                .map(|a| a.keys().cloned().collect())
                .unwrap_or_default()
        };
        let known = keys(&parsed);
        if let Some(k) = keys(&raw).into_iter().find(|k| !known.contains(k)) {
            return Err(Error::InvalidConfig(format!(
                "`{k}` is not a parameter of algorithm `{}`",
                config.algo.name()
            )));
        }
        Ok(config)
    }

    /// Parses `path`; a relative `env` is resolved against the config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml_str(&text)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        if self.env.is_relative() {
            self.env = dir.join(&self.env);
        }
    }

    pub fn load_env(&self) -> Result<ContextualBandit> {
        if !self.env.exists() {
            return Err(Error::InvalidConfig(format!(
                "environment file {} does not exist",
                self.env.display()
            )));
        }
        ContextualBandit::load(&self.env)
    }

    pub fn algorithm(&self) -> Result<Algorithm> {
        let baseline = |algo| {
            let config = BaselineConfig {
                algo,
                eta: self.algo.eta(),
                iterations: self.iterations,
                batch_size: self.batch_size,
                gamma: self.gamma,
            };
            config.validate()?;
            Ok(Algorithm::Baseline(config))
        };
        match &self.algo {
            AlgoSpec::Rebel { eta, regression } => {
                let config = RebelConfig {
                    eta: *eta,
                    iterations: self.iterations,
                    batch_size: self.batch_size,
                    base: regression.base()?,
                    solver: regression.solver(),
                    gamma: self.gamma,
                };
                config.validate()?;
                Ok(Algorithm::Rebel(config))
            }
            AlgoSpec::Md { .. } => baseline(BaselineAlgo::MdOracle),
            AlgoSpec::Npg { population, .. } => baseline(BaselineAlgo::Npg {
                population: *population,
            }),
            AlgoSpec::Reinforce { .. } => baseline(BaselineAlgo::Reinforce),
            AlgoSpec::Rloo { k, .. } => baseline(BaselineAlgo::Rloo { k: *k }),
            AlgoSpec::PpoClip {
                epsilon, inner_steps, ..
            } => baseline(BaselineAlgo::PpoClip {
                epsilon: *epsilon,
                inner_steps: *inner_steps,
            }),
            AlgoSpec::IterDpo { beta, steps, .. } => baseline(BaselineAlgo::IterativeDpo {
                beta: *beta,
                steps: *steps,
            }),
            AlgoSpec::SpoRebel {
                eta,
                feedback,
                opponent_samples,
                regression,
            } => {
                if self.gamma != 0.0 {
                    return Err(Error::InvalidConfig("spo_rebel does not use gamma".into()));
                }
                let feedback = match feedback {
                    FeedbackKind::Exact => PreferenceFeedback::Exact,
                    FeedbackKind::Binary => PreferenceFeedback::Binary {
                        opponent_samples: opponent_samples.unwrap_or(1),
                    },
                };
                let config = SpoConfig {
                    eta: *eta,
                    iterations: self.iterations,
                    batch_size: self.batch_size,
                    base: regression.base()?,
                    solver: regression.solver(),
                    feedback,
                };
                config.validate()?;
                Ok(Algorithm::Spo(config))
            }
        }
    }

    /// Checks everything a run needs before it starts.
    pub fn validate(&self) -> Result<ContextualBandit> {
        let env = self.load_env()?;
        self.algorithm()?;
        if matches!(self.algo, AlgoSpec::SpoRebel { .. }) && env.preferences().is_none() {
            return Err(Error::InvalidConfig(format!(
                "spo_rebel needs an environment with preferences ({})",
                self.env.display()
            )));
        }
        Ok(env)
    }

    /// Replaces `[algo]` with the defaults of `name` unless it already names it.
    pub fn override_algo(&mut self, name: &str) -> Result<()> {
        if self.algo.name() != name {
            self.algo = AlgoSpec::default_for(name)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub algo: String,
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub initial: PolicyEval,
    pub final_expected_reward: f64,
    pub final_kl_ref: f64,
    pub final_suboptimality: f64,
    /// Best suboptimality among `π_0..π_T`.
    pub best_suboptimality: f64,
    /// Mean expected reward over `π_1..π_T` (`π_0` when `T = 0`).
    pub auc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_duality_gap: Option<f64>,
}

impl RunSummary {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    fn new(config: &ExperimentConfig, env: &ContextualBandit, initial: &SoftmaxPolicy, records: &[RunRecord]) -> Self {
        let initial = evaluate(env, initial, initial);
        let last = records.last();
        let auc = if records.is_empty() {
            initial.expected_reward
        } else {
            records.iter().map(|r| r.expected_reward).sum::<f64>() / records.len() as f64
        };
        let best = records
            .iter()
            .map(|r| r.suboptimality)
            .fold(initial.suboptimality, f64::min);
        let final_duality_gap = match last {
            Some(r) => r.duality_gap,
            None => env
                .preferences()
                .map(|p| duality_gap(p, env.rho(), &Table::uniform(env.contexts(), env.actions())).gap),
        };
        Self {
            algo: config.algo.name().to_string(),
            seed: config.seed,
            iterations: config.iterations,
            batch_size: config.batch_size,
            eta: config.algo.eta(),
            final_expected_reward: last.map_or(initial.expected_reward, |r| r.expected_reward),
            final_kl_ref: last.map_or(initial.kl_ref, |r| r.kl_ref),
            final_suboptimality: last.map_or(initial.suboptimality, |r| r.suboptimality),
            best_suboptimality: best,
            auc,
            final_duality_gap,
            initial,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutput {
    pub summary: RunSummary,
    pub records: Vec<RunRecord>,
    pub final_policy: SoftmaxPolicy,
    pub wall_time: f64,
}

/// Receives records as they are produced.
pub trait RecordSink {
    fn record(&mut self, record: &RunRecord) -> Result<()>;
}

impl RecordSink for () {
    fn record(&mut self, _: &RunRecord) -> Result<()> {
        Ok(())
    }
}

/// Streams `metrics.jsonl` and `curve.csv` into a directory.
pub struct DirectorySink {
    metrics: BufWriter<File>,
    curve: csv::Writer<File>,
}

#[derive(Serialize)]
struct CurveRow {
    iteration: usize,
    reward: f64,
    kl_step: f64,
    kl_ref: f64,
    loss: Option<f64>,
}

impl DirectorySink {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            metrics: BufWriter::new(File::create(dir.join("metrics.jsonl"))?),
            curve: csv::Writer::from_path(dir.join("curve.csv"))?,
        })
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.curve.flush()?;
        Ok(())
    }
}

impl RecordSink for DirectorySink {
    fn record(&mut self, r: &RunRecord) -> Result<()> {
        writeln!(self.metrics, "{}", r.to_json_line())?;
        self.curve.serialize(CurveRow {
            iteration: r.iteration,
            reward: r.expected_reward,
            kl_step: r.kl_step,
            kl_ref: r.kl_ref,
            loss: r.loss,
        })?;
        Ok(())
    }
}

fn drive<U: PolicyUpdate>(
    env: &ContextualBandit,
    updater: U,
    initial: SoftmaxPolicy,
    iterations: usize,
    rng: &mut SeededRng,
    sink: &mut dyn RecordSink,
) -> Result<(Vec<RunRecord>, SoftmaxPolicy)> {
    let mut runner = Runner::new(env, updater, initial);
    for _ in 0..iterations {
        let record = runner.step(rng)?;
        sink.record(record)?;
    }
    let out = runner.finish();
    Ok((out.records, out.final_policy))
}

/// Runs `config` from the uniform policy, feeding every record to `sink`
/// before the next update starts.
pub fn execute(config: &ExperimentConfig, sink: &mut dyn RecordSink) -> Result<TrainOutput> {
    let env = config.validate()?;
    let initial = SoftmaxPolicy::tabular(env.contexts(), env.actions());
    let mut rng = seeded_rng(config.seed);
    let start = Instant::now();
    let (records, final_policy) = match config.algorithm()? {
        Algorithm::Rebel(c) => drive(
            &env,
            RebelUpdate::new(c)?,
            initial.clone(),
            config.iterations,
            &mut rng,
            sink,
        )?,
        Algorithm::Baseline(c) => drive(
            &env,
            BaselineUpdate::new(c)?,
            initial.clone(),
            config.iterations,
            &mut rng,
            sink,
        )?,
        Algorithm::Spo(c) => drive(
            &env,
            SpoUpdate::new(c)?,
            initial.clone(),
            config.iterations,
            &mut rng,
            sink,
        )?,
    };
    let wall_time = start.elapsed().as_secs_f64();
    Ok(TrainOutput {
        summary: RunSummary::new(config, &env, &initial, &records),
        records,
        final_policy,
        wall_time,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Trains and writes `metrics.jsonl`, `curve.csv`, `checkpoint.json` and
/// `summary.json` into `out`. On failure the metrics written so far stay.
pub fn train(config: &ExperimentConfig, out: &Path) -> Result<TrainOutput> {
    config.validate()?;
    let mut sink = DirectorySink::create(out)?;
    let result = execute(config, &mut sink);
    sink.flush()?;
    let output = result?;
    output.final_policy.save(out.join("checkpoint.json"))?;
    write_json(&out.join("summary.json"), &output.summary)?;
    Ok(output)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    pub algo: String,
    pub final_expected_reward: f64,
    pub final_kl_ref: f64,
    pub final_suboptimality: f64,
    pub auc: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub iterations: usize,
    pub batch_size: usize,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<16} {:<10} {:>14} {:>12} {:>14} {:>12} {:>10}\n",
            "run", "algo", "final_reward", "final_kl", "suboptimality", "auc", "wall_s"
        );
        for r in &self.rows {
            s += &format!(
                "{:<16} {:<10} {:>14.6} {:>12.6} {:>14.6} {:>12.6} {:>10.3}\n",
                r.label, r.algo, r.final_expected_reward, r.final_kl_ref, r.final_suboptimality, r.auc, r.wall_time
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn labels(configs: &[ExperimentConfig]) -> Vec<String> {
    configs
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{i}_{}", c.algo.name()))
        .collect()
}

/// Runs every config (concurrently) on a matched budget. Each member writes
/// its artifacts to `out/<index>_<algo>/` when `out` is given.
pub fn compare(configs: &[ExperimentConfig], out: Option<&Path>) -> Result<ComparisonTable> {
    if configs.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "compare needs at least 2 configs, got {}",
            configs.len()
        )));
    }
    let envs = configs.iter().map(|c| c.validate()).collect::<Result<Vec<_>>>()?;
    let first = &configs[0];
    for (c, env) in configs.iter().zip(&envs).skip(1) {
        if *env != envs[0] {
            return Err(Error::BudgetMismatch(format!(
                "{} and {} describe different environments",
                first.env.display(),
                c.env.display()
            )));
        }
        if (c.iterations, c.batch_size) != (first.iterations, first.batch_size) {
            return Err(Error::BudgetMismatch(format!(
                "iterations x batch_size {} x {} vs {} x {}",
                first.iterations, first.batch_size, c.iterations, c.batch_size
            )));
        }
    }
    let labels = labels(configs);
    let results: Vec<Result<TrainOutput>> = configs
        .par_iter()
        .zip(&labels)
        .map(|(c, label)| match out {
            Some(dir) => train(c, &dir.join(label)),
            None => execute(c, &mut ()),
        })
        .collect();
    let mut rows = Vec::with_capacity(configs.len());
    for (r, label) in results.into_iter().zip(labels) {
        let r = r?;
        rows.push(ComparisonRow {
            label,
            algo: r.summary.algo,
            final_expected_reward: r.summary.final_expected_reward,
            final_kl_ref: r.summary.final_kl_ref,
            final_suboptimality: r.summary.final_suboptimality,
            auc: r.summary.auc,
            wall_time: r.wall_time,
        });
    }
    let table = ComparisonTable {
        iterations: first.iterations,
        batch_size: first.batch_size,
        rows,
    };
    if let Some(dir) = out {
        write_json(&dir.join("comparison.json"), &table)?;
        table.write_csv(&dir.join("comparison.csv"))?;
    }
    Ok(table)
}

/// Parses a command-line value as a TOML scalar (`0.3`, `4`, `true`, `exact`).
pub fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

/// `config` with `param` set to `value`. Top-level keys are set directly; any
/// other name (optionally prefixed `algo.`) goes into `[algo]`. Unknown
/// parameters are rejected.
pub fn with_param(config: &ExperimentConfig, param: &str, value: &toml::Value) -> Result<ExperimentConfig> {
    let mut table = toml::Table::try_from(config).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let top = ["seed", "iterations", "batch_size", "gamma"];
    let key = param.strip_prefix("algo.").unwrap_or(param);
    if top.contains(&param) {
        table.insert(param.to_string(), value.clone());
    } else if key == "name" || param == "env" || param == "out" {
        return Err(Error::InvalidConfig(format!("`{param}` cannot be swept")));
    } else {
        let algo = table
            .get_mut("algo")
            .and_then(toml::Value::as_table_mut)
            .expect("algo serializes as a table");
        algo.insert(key.to_string(), value.clone());
    }
    ExperimentConfig::from_table(table).map_err(|e| match e {
        Error::TomlDe(e) => Error::InvalidConfig(format!("cannot set `{param}` = {value}: {}", e.message())),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepEntry {
    pub value: String,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    /// Sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedVariance {
    pub final_expected_reward: Spread,
    pub final_suboptimality: Spread,
    pub final_kl_ref: Spread,
    pub auc: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub parameter: String,
    pub entries: Vec<SweepEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed_variance: Option<SeedVariance>,
}

impl SweepReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<12} {:>14} {:>12} {:>14} {:>12}\n",
            self.parameter, "final_reward", "final_kl", "suboptimality", "auc"
        );
        for e in &self.entries {
            s += &format!(
                "{:<12} {:>14.6} {:>12.6} {:>14.6} {:>12.6}\n",
                e.value,
                e.summary.final_expected_reward,
                e.summary.final_kl_ref,
                e.summary.final_suboptimality,
                e.summary.auc
            );
        }
        if let Some(v) = &self.seed_variance {
            s += &format!(
                "{:<12} {:>14} {:>12} {:>14} {:>12}\n",
                "mean±std",
                format!("{:.4}±{:.4}", v.final_expected_reward.mean, v.final_expected_reward.std),
                format!("{:.4}±{:.4}", v.final_kl_ref.mean, v.final_kl_ref.std),
                format!("{:.4}±{:.4}", v.final_suboptimality.mean, v.final_suboptimality.std),
                format!("{:.4}±{:.4}", v.auc.mean, v.auc.std),
            );
        }
        s
    }
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One run per value of `param`, concurrently. A seed sweep also reports
/// mean and standard deviation across seeds. Member artifacts go to
/// `out/<param>=<value>/`.
pub fn sweep(base: &ExperimentConfig, param: &str, values: &[toml::Value], out: Option<&Path>) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| with_param(base, param, v))
        .collect::<Result<Vec<_>>>()?;
    let summaries: Vec<Result<RunSummary>> = configs
        .par_iter()
        .zip(values)
        .map(|(c, v)| {
            let r = match out {
                Some(dir) => train(c, &dir.join(format!("{param}={}", value_label(v))))?,
                None => execute(c, &mut ())?,
            };
            Ok(r.summary)
        })
        .collect();
    let entries = summaries
        .into_iter()
        .zip(values)
        .map(|(s, v)| {
            Ok(SweepEntry {
                value: value_label(v),
                summary: s?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let seed_variance = (param == "seed").then(|| {
        let pick = |f: fn(&RunSummary) -> f64| Spread::of(&entries.iter().map(|e| f(&e.summary)).collect::<Vec<_>>());
        SeedVariance {
            final_expected_reward: pick(|s| s.final_expected_reward),
            final_suboptimality: pick(|s| s.final_suboptimality),
            final_kl_ref: pick(|s| s.final_kl_ref),
            auc: pick(|s| s.auc),
        }
    });
    let report = SweepReport {
        parameter: param.to_string(),
        entries,
        seed_variance,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("sweep.json"), &report)?;
    }
    Ok(report)
}

/// Sizes of the verification battery.
#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub envs: usize,
    pub instances: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            envs: 20,
            instances: 100,
        }
    }
}

fn lemma_eta(env: &ContextualBandit, t: usize) -> f64 {
    let a = env.reward_spread();
    ((env.actions() as f64).ln() / (a * a * t as f64)).sqrt()
}

fn random_envs(rng: &mut SeededRng, n: usize) -> Vec<ContextualBandit> {
    (0..n)
        .map(|_| loop {
            let env = ContextualBandit::random(rng, 4, 6);
            if env.reward_spread() > 0.0 {
                break env;
            }
        })
        .collect()
}

/// Exact-solver runs: trajectory equals mirror descent, improvement is
/// monotone and steps are conservative.
fn md_battery(envs: &[ContextualBandit], rng: &mut SeededRng) -> Result<Vec<CheckResult>> {
    let (mut md, mut mono, mut cons) = (Vec::new(), Vec::new(), Vec::new());
    for env in envs {
        let eta = rng.random_range(0.1..3.0);
        let config = RebelConfig {
            eta,
            iterations: 50,
            ..RebelConfig::default()
        };
        let run = run_rebel(env, &config, SoftmaxPolicy::tabular(env.contexts(), env.actions()), rng)?;
        let desc = format!(
            "contexts={} actions={} eta={eta:.4} T=50",
            env.contexts(),
            env.actions()
        );
        md.push(CheckResult::new(
            "md_equivalence",
            theory::md_trajectory_gap(&run, env, eta),
            1e-9,
            desc,
        ));
        let (m, c) = theory::check_improvement_and_conservativity(&run, env, eta);
        mono.push(m);
        cons.push(c);
    }
    Ok(vec![
        CheckResult::aggregate("md_equivalence", &md),
        CheckResult::aggregate("monotone_improvement", &mono),
        CheckResult::aggregate("conservativity", &cons),
    ])
}

/// Lemma-η exact runs: regret bound, reparameterization, error decomposition.
fn regret_battery(envs: &[ContextualBandit], rng: &mut SeededRng) -> Result<Vec<CheckResult>> {
    let t = 100;
    let (mut lemma2, mut reparam, mut lemma1, mut thm1) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for env in envs {
        let eta = lemma_eta(env, t);
        let config = RebelConfig {
            eta,
            iterations: t,
            ..RebelConfig::default()
        };
        let initial = SoftmaxPolicy::tabular(env.contexts(), env.actions());
        let run = run_rebel(env, &config, initial.clone(), rng)?;
        let star = env.optimal_policy();
        let adv = theory::iterate_advantages(&run, env.rho(), eta);
        lemma2.push(theory::check_lemma2_regret(
            &adv,
            &initial.prob_table(),
            &star,
            eta,
            Some(env.reward_spread()),
        ));
        reparam.push(theory::check_reparameterization(&run, env.rho(), eta));
        thm1.push(theory::check_theorem1_regret(
            &run,
            env,
            &star,
            eta,
            Some(env.reward_spread()),
        ));
        for step in theory::run_steps(&run, env.rho(), eta).iter().step_by(25) {
            lemma1.push(theory::check_lemma1_decomposition(step));
        }
    }
    Ok(vec![
        CheckResult::aggregate("lemma2_regret", &lemma2),
        CheckResult::aggregate("reparameterization", &reparam),
        CheckResult::aggregate("lemma1_decomposition", &lemma1),
        CheckResult::aggregate("theorem1_regret_exact", &thm1),
    ])
}

/// Gradient-descent runs with nonzero regression error, on-policy and offline.
fn gd_battery(envs: &[ContextualBandit], rng: &mut SeededRng) -> Result<Vec<CheckResult>> {
    let t = 50;
    let mut thm1 = Vec::new();
    let mut lemma1 = Vec::new();
    for (i, env) in envs.iter().enumerate() {
        let eta = lemma_eta(env, t);
        let config = RebelConfig {
            eta,
            iterations: t,
            batch_size: 16,
            base: if i % 2 == 0 {
                BaseDistribution::OnPolicy
            } else {
                BaseDistribution::OfflineFixed
            },
            solver: Solver::GradDescent {
                steps: 5,
                step_size: None,
            },
            gamma: 0.0,
        };
        let run = run_rebel(env, &config, SoftmaxPolicy::tabular(env.contexts(), env.actions()), rng)?;
        thm1.push(theory::check_theorem1_regret(
            &run,
            env,
            &env.optimal_policy(),
            eta,
            Some(env.reward_spread()),
        ));
        if let Some(step) = theory::run_steps(&run, env.rho(), eta).last() {
            lemma1.push(theory::check_lemma1_decomposition(step));
        }
    }
    Ok(vec![
        CheckResult::aggregate("theorem1_regret_gd", &thm1),
        CheckResult::aggregate("lemma1_decomposition_gd", &lemma1),
    ])
}

fn claims_battery(rng: &mut SeededRng, n: usize, gauss_newton: &GaussNewtonFn) -> Result<Vec<CheckResult>> {
    let results = theory::check_claims_with(rng, n, gauss_newton)?;
    let (c1, c2): (Vec<_>, Vec<_>) = results.into_iter().partition(|r| r.name.starts_with("claim1"));
    Ok(vec![
        CheckResult::aggregate("claim1_population_identity", &c1),
        CheckResult::aggregate("claim2_finite_sample_identity", &c2),
    ])
}

fn regression_battery(rng: &mut SeededRng) -> Result<Vec<CheckResult>> {
    let env = ContextualBandit::canonical();
    let current = SoftmaxPolicy::tabular(1, 3);
    let probs = current.prob_table();
    let exact = crate::regression::solve_regression_exact_tabular(&current, env.rewards(), 1.0)?;
    let step = RegressionStep {
        rho: env.rho(),
        current: &current,
        next: &exact,
        base: &probs,
        rewards: env.rewards(),
        eta: 1.0,
    };
    let mut out = vec![theory::check_regression_epsilon(&step, Some(1e-18))];
    let inst = ClaimInstance::random(rng);
    let theta: Vec<f64> = inst
        .policy
        .theta()
        .iter()
        .map(|t| t + rng.random_range(-1.0..1.0))
        .collect();
    let next = inst.policy.with_theta(theta);
    out.push(theory::check_lemma1_decomposition(&RegressionStep {
        rho: &inst.rho,
        current: &inst.policy,
        next: &next,
        base: &inst.base,
        rewards: &inst.rewards,
        eta: inst.eta,
    }));
    Ok(out)
}

/// The full battery with the library's Gauss-Newton solver.
pub fn verify_battery(options: &VerifyOptions) -> Result<Vec<CheckResult>> {
    verify_battery_with(options, &crate::regression::gauss_newton_step)
}

/// The full battery with `gauss_newton` standing in for the solver.
pub fn verify_battery_with(options: &VerifyOptions, gauss_newton: &GaussNewtonFn) -> Result<Vec<CheckResult>> {
    let mut rng = seeded_rng(options.seed);
    let envs = random_envs(&mut rng, options.envs);
    let mut out = regression_battery(&mut rng)?;
    out.extend(md_battery(&envs, &mut rng)?);
    out.extend(regret_battery(&envs, &mut rng)?);
    out.extend(gd_battery(&envs, &mut rng)?);
    out.extend(claims_battery(&mut rng, options.instances, gauss_newton)?);
    out.extend(theory::check_gradients(&mut rng, options.instances)?);
    Ok(out)
}

/// 0 iff every check passed.
pub fn exit_code(results: &[CheckResult]) -> i32 {
    i32::from(results.iter().any(|r| !r.passed))
}

#[cfg(test)]
mod tests {
    use super::*;

    const CANONICAL: &str = "contexts = 1\nactions = 3\nrho = [1.0]\nrewards = [1.0, 0.5, 0.0]\n";

    fn setup(algo: &str, iterations: usize) -> (tempfile::TempDir, ExperimentConfig) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("env.toml"), CANONICAL).unwrap();
        let text = format!("env = \"env.toml\"\niterations = {iterations}\nbatch_size = 8\n\n[algo]\n{algo}\n");
        std::fs::write(dir.path().join("run.toml"), text).unwrap();
        let config = ExperimentConfig::load(dir.path().join("run.toml")).unwrap();
        (dir, config)
    }

    #[test]
    fn every_algorithm_parses_with_defaults() {
        for name in ALGORITHMS {
            let spec = AlgoSpec::default_for(name).unwrap();
            assert_eq!(spec.name(), name);
        }
        assert!(AlgoSpec::default_for("sac").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = "env = \"e.toml\"\niterations = 1\nbogus = 3\n[algo]\nname = \"md\"\n";
        assert!(ExperimentConfig::from_toml_str(bad).is_err());
        let bad = "env = \"e.toml\"\niterations = 1\n[algo]\nname = \"rebel\"\nsolver = \"newton\"\n";
        assert!(ExperimentConfig::from_toml_str(bad).is_err());
    }

    #[test]
    fn missing_env_is_invalid() {
        let c =
            ExperimentConfig::from_toml_str("env = \"/nonexistent/env.toml\"\niterations = 1\n[algo]\nname = \"md\"\n")
                .unwrap();
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn train_writes_artifacts() {
        let (dir, config) = setup("name = \"rebel\"\neta = 1.0", 5);
        let out = dir.path().join("out");
        let result = train(&config, &out).unwrap();
        let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
        assert_eq!(metrics.lines().count(), 5);
        let curve = std::fs::read_to_string(out.join("curve.csv")).unwrap();
        assert_eq!(curve.lines().next().unwrap(), "iteration,reward,kl_step,kl_ref,loss");
        assert_eq!(curve.lines().count(), 6);
        let policy = SoftmaxPolicy::load(out.join("checkpoint.json")).unwrap();
        assert_eq!(policy, result.final_policy);
        assert!(out.join("summary.json").exists());
    }

    #[test]
    fn zero_iterations_summarize_initial_policy() {
        let (_dir, config) = setup("name = \"rebel\"", 0);
        let r = execute(&config, &mut ()).unwrap();
        assert!(r.records.is_empty());
        assert_eq!(r.summary.final_expected_reward, r.summary.initial.expected_reward);
        assert_eq!(r.summary.final_suboptimality, r.summary.initial.suboptimality);
        assert_eq!(r.summary.final_kl_ref, 0.0);
        assert!((r.summary.final_expected_reward - 0.5).abs() < 1e-15);
    }

    #[test]
    fn divergence_keeps_partial_metrics() {
        let (dir, config) = setup(
            "name = \"rebel\"\nsolver = \"gd\"\ngd_steps = 50\ngd_step_size = 1000.0",
            3,
        );
        let out = dir.path().join("out");
        let err = train(&config, &out).unwrap_err();
        assert!(matches!(err, Error::AtIteration { .. }), "{err}");
        assert!(out.join("metrics.jsonl").exists());
        assert!(!out.join("summary.json").exists());
    }

    #[test]
    fn sweep_parameters() {
        let (_dir, config) = setup("name = \"rebel\"", 10);
        let values: Vec<toml::Value> = ["0.3", "0.7", "1.0", "2.0"].iter().map(|v| parse_value(v)).collect();
        let report = sweep(&config, "eta", &values, None).unwrap();
        assert_eq!(report.entries.len(), 4);
        assert_eq!(report.entries[0].summary.eta, 0.3);
        assert!(sweep(&config, "eta", &[], None).is_err());
        assert!(sweep(&config, "epsilon", &values, None).is_err());
        assert!(with_param(&config, "name", &parse_value("md")).is_err());
        assert!(with_param(&config, "algo.solver", &parse_value("gd"))
            .unwrap()
            .algorithm()
            .is_ok());
    }

    #[test]
    fn seed_sweep_reports_spread() {
        let (_dir, config) = setup("name = \"reinforce\"\neta = 0.5", 10);
        let seeds: Vec<toml::Value> = (0..4).map(toml::Value::Integer).collect();
        let report = sweep(&config, "seed", &seeds, None).unwrap();
        let v = report.seed_variance.unwrap();
        assert!(v.final_expected_reward.std > 0.0);
        assert_eq!(
            Spread::of(&[1.0, 3.0]),
            Spread {
                mean: 2.0,
                std: 2f64.sqrt()
            }
        );
    }

    #[test]
    fn compare_requires_matched_budget() {
        let (dir, a) = setup("name = \"rebel\"", 10);
        assert!(compare(std::slice::from_ref(&a), None).is_err());
        let mut b = a.clone();
        b.algo = AlgoSpec::default_for("md").unwrap();
        b.batch_size = 16;
        assert!(matches!(
            compare(&[a.clone(), b.clone()], None),
            Err(Error::BudgetMismatch(_))
        ));
        b.batch_size = a.batch_size;
        let table = compare(&[a, b], Some(&dir.path().join("cmp"))).unwrap();
        assert_eq!(table.rows.len(), 2);
        let diff = (table.rows[0].final_expected_reward - table.rows[1].final_expected_reward).abs();
        assert!(diff <= 1e-10);
        assert!(dir.path().join("cmp/comparison.csv").exists());
        assert!(dir.path().join("cmp/0_rebel/metrics.jsonl").exists());
    }

    #[test]
    fn parse_values() {
        assert_eq!(parse_value("0.3"), toml::Value::Float(0.3));
        assert_eq!(parse_value("4"), toml::Value::Integer(4));
        assert_eq!(parse_value("gd"), toml::Value::String("gd".into()));
    }

    #[test]
    fn exit_codes() {
        let ok = CheckResult::new("a", 0.0, 1.0, "");
        let bad = CheckResult::new("b", 2.0, 1.0, "");
        assert_eq!(exit_code(std::slice::from_ref(&ok)), 0);
        assert_eq!(exit_code(&[ok, bad]), 1);
    }
}
