//! Relative-reward regression: one iteration fits
//!
//! ```text
//! Σ_n w_n ( (1/η)[ln π_θ(y|x)/π_t(y|x) − ln π_θ(y'|x)/π_t(y'|x)] − (r(x,y) − r(x,y')) )²
//! ```
//!
//! over candidate parameters θ, with `y ∼ π_t(·|x)` and `y' ∼ μ(·|x)`.
//! Pairing two actions of the same context cancels the partition function,
//! so the predictor never needs a per-context normalizer.

use rand::Rng;

use crate::env::{ContextualBandit, ShapedReward};
use crate::numerics::sample_categorical;
use crate::numerics::{dot, min_norm_lstsq, DenseMatrix, SeededRng};
use crate::policy::{best_of_n, extreme_of_n_distribution, worst_of_n, SoftmaxPolicy};
use crate::run::{PolicyUpdate, RunOutput, Runner, StepContext, UpdateOutcome};
use crate::{Error, Result, Table};

/// `(x, y, y', r(x,y), r(x,y'))` with a weight (1 for sampled data,
/// `ρ(x) π_t(y|x) μ(y'|x)` for population data).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionTriple {
    pub x: usize,
    pub y: usize,
    pub y_prime: usize,
    pub r_y: f64,
    pub r_y_prime: f64,
    pub weight: f64,
}

impl RegressionTriple {
    pub fn sampled(x: usize, y: usize, y_prime: usize, r_y: f64, r_y_prime: f64) -> Self {
        Self {
            x,
            y,
            y_prime,
            r_y,
            r_y_prime,
            weight: 1.0,
        }
    }

    pub fn target(&self) -> f64 {
        self.r_y - self.r_y_prime
    }
}

/// Where the comparison action `y'` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseDistribution {
    /// `μ = π_t`.
    OnPolicy,
    /// `μ = π_0`, frozen for the whole run.
    OfflineFixed,
    /// Best of `N` draws from `π_t`.
    BestOfN(usize),
    /// Worst of `N` draws from `π_t`.
    WorstOfN(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Solver {
    /// Closed form on tabular policies: `θ_{t+1} = θ_t + η r`.
    ExactTabular,
    /// Full-batch gradient descent warm-started at `θ_t`. `None` picks
    /// [`default_step_size`].
    GradDescent { steps: usize, step_size: Option<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RebelConfig {
    pub eta: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub base: BaseDistribution,
    pub solver: Solver,
    /// KL-penalty coefficient of the shaped reward.
    pub gamma: f64,
}

impl Default for RebelConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            iterations: 100,
            batch_size: 64,
            base: BaseDistribution::OnPolicy,
            solver: Solver::ExactTabular,
            gamma: 0.0,
        }
    }
}

impl RebelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if let BaseDistribution::BestOfN(0) | BaseDistribution::WorstOfN(0) = self.base {
            return Err(Error::InvalidConfig("best/worst-of-N needs N >= 1".into()));
        }
        if let Solver::GradDescent { step_size: Some(s), .. } = self.solver {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidConfig(format!("gd step size must be > 0, got {s}")));
            }
        }
        Ok(())
    }
}

/// Exact table of `μ(·|x)` for every context.
pub fn base_distribution_table(base: BaseDistribution, current: &Table, reference: &Table, rewards: &Table) -> Table {
    match base {
        BaseDistribution::OnPolicy => current.clone(),
        BaseDistribution::OfflineFixed => reference.clone(),
        BaseDistribution::BestOfN(n) | BaseDistribution::WorstOfN(n) => {
            let best = matches!(base, BaseDistribution::BestOfN(_));
            let values = (0..current.contexts())
                .flat_map(|x| extreme_of_n_distribution(current.row(x), rewards.row(x), n, best))
                .collect();
            Table::from_vec(current.contexts(), current.actions(), values)
        }
    }
}

/// Draws `y' ∼ μ(·|x)` by the base distribution's sampling procedure.
pub fn sample_base<R: Rng + ?Sized>(
    base: BaseDistribution,
    x: usize,
    current: &Table,
    reference: &Table,
    rewards: &Table,
    rng: &mut R,
) -> usize {
    match base {
        BaseDistribution::OnPolicy => sample_categorical(current.row(x), rng),
        BaseDistribution::OfflineFixed => sample_categorical(reference.row(x), rng),
        BaseDistribution::BestOfN(n) => best_of_n(current.row(x), rewards.row(x), n, rng),
        BaseDistribution::WorstOfN(n) => worst_of_n(current.row(x), rewards.row(x), n, rng),
    }
}

/// Reward table the regression targets: the environment reward, KL-shaped
/// when `gamma > 0`.
pub fn effective_rewards(env: &ContextualBandit, current: &Table, reference: &Table, gamma: f64) -> Result<Table> {
    ShapedReward {
        base: env.rewards(),
        gamma,
        reference,
        current,
    }
    .table()
}

/// Samples `batch_size` triples: `x ∼ ρ`, `y ∼ π_t`, `y' ∼ μ`. Rewards are
/// shaped before they are stored.
pub fn collect_dataset(
    env: &ContextualBandit,
    current: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
    config: &RebelConfig,
    rng: &mut SeededRng,
) -> Result<Vec<RegressionTriple>> {
    let probs = current.prob_table();
    let ref_probs = reference.prob_table();
    let rewards = effective_rewards(env, &probs, &ref_probs, config.gamma)?;
    Ok(sample_triples(
        env,
        &probs,
        &ref_probs,
        &rewards,
        config.base,
        config.batch_size,
        rng,
    ))
}

fn sample_triples(
    env: &ContextualBandit,
    probs: &Table,
    ref_probs: &Table,
    rewards: &Table,
    base: BaseDistribution,
    n: usize,
    rng: &mut SeededRng,
) -> Vec<RegressionTriple> {
    (0..n)
        .map(|_| {
            let x = env.sample_context(rng);
            let y = sample_categorical(probs.row(x), rng);
            let y_prime = sample_base(base, x, probs, ref_probs, rewards, rng);
            RegressionTriple::sampled(x, y, y_prime, rewards.get(x, y), rewards.get(x, y_prime))
        })
        .collect()
}

/// Every `(x, y, y')` with weight `ρ(x) π_t(y|x) μ(y'|x)`; zero-weight
/// entries are dropped.
pub fn population_dataset(rho: &[f64], current: &Table, base: &Table, rewards: &Table) -> Vec<RegressionTriple> {
    let mut out = Vec::new();
    for (x, &w) in rho.iter().enumerate() {
        for (y, &p) in current.row(x).iter().enumerate() {
            for (y_prime, &m) in base.row(x).iter().enumerate() {
                let weight = w * p * m;
                if weight > 0.0 {
                    out.push(RegressionTriple {
                        x,
                        y,
                        y_prime,
                        r_y: rewards.get(x, y),
                        r_y_prime: rewards.get(x, y_prime),
                        weight,
                    });
                }
            }
        }
    }
    out
}

/// Per-context log-probabilities, computed once per policy.
struct LogProbCache(Vec<Vec<f64>>);

impl LogProbCache {
    fn new(policy: &SoftmaxPolicy) -> Self {
        Self((0..policy.contexts()).map(|x| policy.log_probs(x)).collect())
    }

    fn get(&self, index: usize, x: usize, y: usize) -> Result<f64> {
        let lp = self.0[x][y];
        if lp.is_finite() {
            Ok(lp)
        } else {
            Err(Error::ZeroProbability { index, x, y })
        }
    }
}

fn check_shapes(candidate: &SoftmaxPolicy, current: &SoftmaxPolicy) -> Result<()> {
    if candidate.dim() != current.dim() {
        return Err(Error::Dimension {
            what: "candidate parameters",
            expected: current.dim(),
            found: candidate.dim(),
        });
    }
    Ok(())
}

/// Residuals `(1/η)(log-ratio difference) − (r_y − r_y')` for every triple.
fn residuals(
    candidate: &SoftmaxPolicy,
    current: &SoftmaxPolicy,
    dataset: &[RegressionTriple],
    eta: f64,
) -> Result<Vec<f64>> {
    check_shapes(candidate, current)?;
    let cand = LogProbCache::new(candidate);
    let cur = LogProbCache::new(current);
    dataset
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let ratio_y = cand.get(i, t.x, t.y)? - cur.get(i, t.x, t.y)?;
            let ratio_yp = cand.get(i, t.x, t.y_prime)? - cur.get(i, t.x, t.y_prime)?;
            let predicted = if t.y == t.y_prime {
                0.0
            } else {
                (ratio_y - ratio_yp) / eta
            };
            Ok(predicted - t.target())
        })
        .collect()
}

/// Predicted reward difference `(1/η)[ln π_θ(y)/π_t(y) − ln π_θ(y')/π_t(y')]`.
pub fn predicted_difference(
    candidate: &SoftmaxPolicy,
    current: &SoftmaxPolicy,
    triple: &RegressionTriple,
    eta: f64,
) -> f64 {
    let x = triple.x;
    let (c, t) = (candidate.log_probs(x), current.log_probs(x));
    ((c[triple.y] - t[triple.y]) - (c[triple.y_prime] - t[triple.y_prime])) / eta
}

/// Weighted square loss of the regression at `candidate`.
pub fn rebel_loss(
    candidate: &SoftmaxPolicy,
    current: &SoftmaxPolicy,
    dataset: &[RegressionTriple],
    eta: f64,
) -> Result<f64> {
    let res = residuals(candidate, current, dataset, eta)?;
    Ok(dataset.iter().zip(res).map(|(t, e)| t.weight * e * e).sum())
}

/// Gradient of [`rebel_loss`] in the candidate's parameters. Uses
/// `∇ln π(y|x) − ∇ln π(y'|x) = φ(x,y) − φ(x,y')`.
pub fn rebel_grad(
    candidate: &SoftmaxPolicy,
    current: &SoftmaxPolicy,
    dataset: &[RegressionTriple],
    eta: f64,
) -> Result<Vec<f64>> {
    let res = residuals(candidate, current, dataset, eta)?;
    let mut grad = vec![0.0; candidate.dim()];
    for (t, e) in dataset.iter().zip(res) {
        if t.y == t.y_prime || e == 0.0 {
            continue;
        }
        let coeff = 2.0 * t.weight * e / eta;
        let (fy, fyp) = (candidate.feature(t.x, t.y), candidate.feature(t.x, t.y_prime));
        for ((g, a), b) in grad.iter_mut().zip(fy).zip(fyp) {
            *g += coeff * (a - b);
        }
    }
    Ok(grad)
}

/// Exact population solution on a tabular policy: `θ_t + η r`, i.e.
/// `π_{t+1} ∝ π_t exp(η r)`.
pub fn solve_regression_exact_tabular(current: &SoftmaxPolicy, rewards: &Table, eta: f64) -> Result<SoftmaxPolicy> {
    if !current.is_tabular() {
        return Err(Error::InvalidConfig("exact solver needs a tabular policy".into()));
    }
    if rewards.shape() != (current.contexts(), current.actions()) {
        return Err(Error::Dimension {
            what: "reward table",
            expected: current.dim(),
            found: rewards.values().len(),
        });
    }
    Ok(current.step(rewards.values(), eta))
}

/// Step size `η² / (2 Σ_n w_n ‖φ(x,y) − φ(x,y')‖²)`: at most `1/λ_max` of
/// the loss Hessian, so full-batch descent never overshoots on tabular data.
pub fn default_step_size(policy: &SoftmaxPolicy, dataset: &[RegressionTriple], eta: f64) -> f64 {
    let curvature: f64 = dataset
        .iter()
        .filter(|t| t.y != t.y_prime)
        .map(|t| {
            let d: Vec<f64> = policy
                .feature(t.x, t.y)
                .iter()
                .zip(policy.feature(t.x, t.y_prime))
                .map(|(a, b)| a - b)
                .collect();
            t.weight * dot(&d, &d)
        })
        .sum();
    if curvature > 0.0 {
        eta * eta / (2.0 * curvature)
    } else {
        1.0
    }
}

#[derive(Debug, Clone)]
pub struct GdOutcome {
    pub policy: SoftmaxPolicy,
    /// Loss before the first step and after every step.
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent on [`rebel_loss`] from `θ = θ_t`.
///
/// Fails with [`Error::Divergence`] once the loss exceeds ten times its
/// initial value.
pub fn solve_regression_gd(
    current: &SoftmaxPolicy,
    dataset: &[RegressionTriple],
    eta: f64,
    steps: usize,
    step_size: f64,
) -> Result<GdOutcome> {
    let initial = rebel_loss(current, current, dataset, eta)?;
    let mut losses = Vec::with_capacity(steps + 1);
    losses.push(initial);
    let mut policy = current.clone();
    for step in 1..=steps {
        let grad = rebel_grad(&policy, current, dataset, eta)?;
        policy = policy.step(&grad, -step_size);
        let loss = rebel_loss(&policy, current, dataset, eta)?;
        if !loss.is_finite() || loss > 10.0 * initial {
            return Err(Error::Divergence {
                step,
                initial,
                current: loss,
            });
        }
        losses.push(loss);
    }
    Ok(GdOutcome { policy, losses })
}

/// One Gauss-Newton step: linearize the log-ratio at `θ_t` and return the
/// minimum-norm solution δ of
/// `Σ w ( (1/η)(∇ln π_t(y|x) − ∇ln π_t(y'|x))ᵀ δ − (r_y − r_y') )²`.
pub fn gauss_newton_step(current: &SoftmaxPolicy, dataset: &[RegressionTriple], eta: f64) -> Result<Vec<f64>> {
    let d = current.dim();
    let scores: Vec<Vec<Vec<f64>>> = (0..current.contexts()).map(|x| current.grad_log_probs(x)).collect();
    let mut design = Vec::with_capacity(dataset.len() * d);
    let mut targets = Vec::with_capacity(dataset.len());
    for t in dataset {
        let s = t.weight.sqrt();
        let (gy, gyp) = (&scores[t.x][t.y], &scores[t.x][t.y_prime]);
        design.extend(gy.iter().zip(gyp).map(|(a, b)| s * (a - b) / eta));
        targets.push(s * t.target());
    }
    let a = DenseMatrix::new(dataset.len(), d, design)?;
    Ok(min_norm_lstsq(&a, &targets)?.solution)
}

/// One outer iteration as a [`PolicyUpdate`].
#[derive(Debug, Clone)]
pub struct RebelUpdate {
    config: RebelConfig,
}

impl RebelUpdate {
    pub fn new(config: RebelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }
}

impl PolicyUpdate for RebelUpdate {
    fn name(&self) -> &'static str {
        "rebel"
    }

    fn update(&mut self, ctx: &StepContext<'_>, rng: &mut SeededRng) -> Result<UpdateOutcome> {
        let cfg = &self.config;
        let probs = ctx.current.prob_table();
        let ref_probs = ctx.reference.prob_table();
        let rewards = effective_rewards(ctx.env, &probs, &ref_probs, cfg.gamma)?;
        let base = base_distribution_table(cfg.base, &probs, &ref_probs, &rewards);

        let (next, loss) = match cfg.solver {
            Solver::ExactTabular => {
                let next = solve_regression_exact_tabular(ctx.current, &rewards, cfg.eta)?;
                let population = population_dataset(ctx.env.rho(), &probs, &base, &rewards);
                let loss = rebel_loss(&next, ctx.current, &population, cfg.eta)?;
                (next, loss)
            }
            Solver::GradDescent { steps, step_size } => {
                let data = sample_triples(ctx.env, &probs, &ref_probs, &rewards, cfg.base, cfg.batch_size, rng);
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

/// Runs `config.iterations` outer iterations from `initial`.
pub fn run_rebel(
    env: &ContextualBandit,
    config: &RebelConfig,
    initial: SoftmaxPolicy,
    rng: &mut SeededRng,
) -> Result<RunOutput> {
    Runner::new(env, RebelUpdate::new(config.clone())?, initial).run(config.iterations, rng)
}
