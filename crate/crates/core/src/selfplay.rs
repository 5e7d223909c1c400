//! Self-play for general preferences: the reward at iteration `t` is the
//! win margin against the current policy, `r_t(x, y) = l(x, y, π_t)`.

use crate::env::{ContextualBandit, PreferenceModel};
use crate::numerics::{sample_categorical, SeededRng};
use crate::policy::SoftmaxPolicy;
use crate::regression::{
    base_distribution_table, default_step_size, population_dataset, rebel_loss, sample_base,
    solve_regression_exact_tabular, solve_regression_gd, BaseDistribution, RegressionTriple, Solver,
};
use crate::run::{PolicyUpdate, RunOutput, Runner, StepContext, UpdateOutcome};
use crate::{Error, Result, Table};

/// `l(x, y, π) = E_{y''∼π(·|x)} l(x, y, y'')`.
pub fn winrate_reward(p: &PreferenceModel, probs: &Table, x: usize, y: usize) -> f64 {
    probs
        .row(x)
        .iter()
        .enumerate()
        .filter(|(_, q)| **q > 0.0)
        .map(|(y2, q)| q * p.payoff(x, y, y2))
        .sum()
}

pub fn winrate_table(p: &PreferenceModel, probs: &Table) -> Table {
    let mut out = Table::zeros(probs.contexts(), probs.actions());
    for x in 0..probs.contexts() {
        for y in 0..probs.actions() {
            out.set(x, y, winrate_reward(p, probs, x, y));
        }
    }
    out
}

/// How regression targets are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreferenceFeedback {
    /// `l(x, y, π_t) − l(x, y', π_t)` by enumeration.
    Exact,
    /// Mean over `opponent_samples` draws `y'' ∼ π_t` of `o(y, y'') − o(y', y'')`,
    /// with signed outcomes `o ∈ {−1, 1}`.
    Binary { opponent_samples: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpoConfig {
    pub eta: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub base: BaseDistribution,
    pub solver: Solver,
    pub feedback: PreferenceFeedback,
}

impl Default for SpoConfig {
    fn default() -> Self {
        Self {
            eta: 0.4,
            iterations: 200,
            batch_size: 64,
            base: BaseDistribution::OnPolicy,
            solver: Solver::ExactTabular,
            feedback: PreferenceFeedback::Exact,
        }
    }
}

impl SpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if let PreferenceFeedback::Binary { opponent_samples: 0 } = self.feedback {
            return Err(Error::InvalidConfig(
                "binary feedback needs at least one opponent sample".into(),
            ));
        }
        if self.solver == Solver::ExactTabular && self.feedback != PreferenceFeedback::Exact {
            return Err(Error::InvalidConfig(
                "the exact solver uses exact win rates; binary feedback needs grad_descent".into(),
            ));
        }
        Ok(())
    }
}

/// Signed outcome of one comparison: `+1` if `y` wins, `−1` otherwise.
fn signed_outcome(p: &PreferenceModel, x: usize, y: usize, y2: usize, rng: &mut SeededRng) -> f64 {
    2.0 * f64::from(p.sample_binary(x, y, y2, rng)) - 1.0
}

/// Binary-feedback target for one `(x, y, y')`; `y''` is drawn fresh for each
/// of the `m` comparisons and shared between `y` and `y'`.
pub fn binary_target(
    p: &PreferenceModel,
    probs: &Table,
    x: usize,
    y: usize,
    y_prime: usize,
    m: usize,
    rng: &mut SeededRng,
) -> f64 {
    let total: f64 = (0..m)
        .map(|_| {
            let y2 = sample_categorical(probs.row(x), rng);
            signed_outcome(p, x, y, y2, rng) - signed_outcome(p, x, y_prime, y2, rng)
        })
        .sum();
    total / m as f64
}

pub struct SpoUpdate {
    config: SpoConfig,
}

impl SpoUpdate {
    pub fn new(config: SpoConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }
}

impl PolicyUpdate for SpoUpdate {
    fn name(&self) -> &'static str {
        "spo_rebel"
    }

    fn update(&mut self, ctx: &StepContext<'_>, rng: &mut SeededRng) -> Result<UpdateOutcome> {
        let cfg = &self.config;
        let prefs = ctx
            .env
            .preferences()
            .ok_or_else(|| Error::InvalidEnv("self-play needs a preference table".into()))?;
        let probs = ctx.current.prob_table();
        let ref_probs = ctx.reference.prob_table();
        let rewards = winrate_table(prefs, &probs);
        let base = base_distribution_table(cfg.base, &probs, &ref_probs, &rewards);

        let (next, loss) = match cfg.solver {
            Solver::ExactTabular => {
                let next = solve_regression_exact_tabular(ctx.current, &rewards, cfg.eta)?;
                let population = population_dataset(ctx.env.rho(), &probs, &base, &rewards);
                let loss = rebel_loss(&next, ctx.current, &population, cfg.eta)?;
                (next, loss)
            }
            Solver::GradDescent { steps, step_size } => {
                let data: Vec<RegressionTriple> = (0..cfg.batch_size)
                    .map(|_| {
                        let x = ctx.env.sample_context(rng);
                        let y = sample_categorical(probs.row(x), rng);
                        let y_prime = sample_base(cfg.base, x, &probs, &ref_probs, &rewards, rng);
                        match cfg.feedback {
                            PreferenceFeedback::Exact => {
                                RegressionTriple::sampled(x, y, y_prime, rewards.get(x, y), rewards.get(x, y_prime))
                            }
                            PreferenceFeedback::Binary { opponent_samples } => {
                                let target = binary_target(prefs, &probs, x, y, y_prime, opponent_samples, rng);
                                RegressionTriple::sampled(x, y, y_prime, target, 0.0)
                            }
                        }
                    })
                    .collect();
                let step_size = step_size.unwrap_or_else(|| default_step_size(ctx.current, &data, cfg.eta));
                let out = solve_regression_gd(ctx.current, &data, cfg.eta, steps, step_size)?;
                let loss = *out.losses.last().expect("initial loss recorded");
                (out.policy, loss)
            }
        };
        Ok(UpdateOutcome {
            next,
            loss: Some(loss),
            base,
            rewards,
        })
    }
}

/// Runs self-play. The metrics stream carries the duality gap of the running
/// mixture `Unif(π_1, ..., π_t)`.
pub fn run_spo_rebel(
    env: &ContextualBandit,
    config: &SpoConfig,
    initial: SoftmaxPolicy,
    rng: &mut SeededRng,
) -> Result<RunOutput> {
    if env.preferences().is_none() {
        return Err(Error::InvalidEnv("self-play needs a preference table".into()));
    }
    Runner::new(env, SpoUpdate::new(config.clone())?, initial).run(config.iterations, rng)
}

/// `Unif(π_1, ..., π_T)` of a finished run, as an explicit table. `None` for
/// a run with no iterations.
pub fn averaged_policy(run: &RunOutput) -> Option<Table> {
    let tables: Vec<Table> = run.iterates().skip(1).map(|p| p.prob_table()).collect();
    Table::average(&tables)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualityGapReport {
    pub gap: f64,
    /// `max_π l(π, π̂)`.
    pub max_value: f64,
    /// `min_π l(π̂, π)`.
    pub min_value: f64,
    /// Pure best response of the max side, per context.
    pub max_response: Vec<usize>,
    /// Pure best response of the min side, per context.
    pub min_response: Vec<usize>,
}

/// Exact duality gap of `policy` by per-context pure best responses.
pub fn duality_gap(p: &PreferenceModel, rho: &[f64], policy: &Table) -> DualityGapReport {
    let actions = p.actions();
    let mut max_value = 0.0;
    let mut min_value = 0.0;
    let mut max_response = Vec::with_capacity(rho.len());
    let mut min_response = Vec::with_capacity(rho.len());
    for (x, &w) in rho.iter().enumerate() {
        // l(x, y, π̂) for the max side; l(x, π̂, y) for the min side.
        let row = |y: usize, challenger_first: bool| -> f64 {
            policy
                .row(x)
                .iter()
                .enumerate()
                .map(|(y2, q)| {
                    q * if challenger_first {
                        p.payoff(x, y, y2)
                    } else {
                        p.payoff(x, y2, y)
                    }
                })
                .sum()
        };
        let (best, best_v) = (0..actions)
            .map(|y| (y, row(y, true)))
            .fold((0, f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });
        let (worst, worst_v) = (0..actions)
            .map(|y| (y, row(y, false)))
            .fold((0, f64::INFINITY), |acc, c| if c.1 < acc.1 { c } else { acc });
        max_value += w * best_v;
        min_value += w * worst_v;
        max_response.push(best);
        min_response.push(worst);
    }
    DualityGapReport {
        gap: max_value - min_value,
        max_value,
        min_value,
        max_response,
        min_response,
    }
}
