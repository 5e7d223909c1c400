//! Comparison algorithms: exact mirror descent, natural policy gradient,
//! REINFORCE, RLOO, a critic-free PPO-clip and iterative DPO.
//!
//! Every sampled baseline draws `2 · batch_size` completions per iteration,
//! the same number a REBEL iteration with `batch_size` triples consumes.

use crate::env::ContextualBandit;
use crate::numerics::{pinv_apply, sample_categorical, DenseMatrix, SeededRng};
use crate::policy::{joint_weights, log_softmax, mean_kl, policy_kl, SoftmaxPolicy};
use crate::regression::{effective_rewards, RegressionTriple};
use crate::run::{PolicyUpdate, RunOutput, Runner, StepContext, UpdateOutcome};
use crate::{Error, Result, Table};

/// One sampled completion `(x, y, r(x, y))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Completion {
    pub x: usize,
    pub y: usize,
    pub reward: f64,
}

/// `π_{t+1}(y|x) ∝ π_t(y|x) exp(η r(x, y))`, computed in log space.
pub fn md_oracle_step(probs: &Table, rewards: &Table, eta: f64) -> Table {
    let mut out = Table::zeros(probs.contexts(), probs.actions());
    for x in 0..probs.contexts() {
        let logits: Vec<f64> = probs
            .row(x)
            .iter()
            .zip(rewards.row(x))
            .map(|(p, r)| if *p > 0.0 { p.ln() + eta * r } else { f64::NEG_INFINITY })
            .collect();
        for (o, l) in out.row_mut(x).iter_mut().zip(log_softmax(&logits)) {
            *o = l.exp();
        }
    }
    out
}

/// Population policy gradient `E_{x∼ρ, y∼π}[∇ln π(y|x) r(x, y)]`.
pub fn policy_gradient(policy: &SoftmaxPolicy, rho: &[f64], rewards: &Table) -> Vec<f64> {
    let mut grad = vec![0.0; policy.dim()];
    for (x, &w) in rho.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let probs = policy.probs(x);
        for (y, g) in policy.grad_log_probs(x).into_iter().enumerate() {
            let c = w * probs[y] * rewards.get(x, y);
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += c * b);
        }
    }
    grad
}

/// Population NPG: `θ + η F† ∇J` with `F` and `∇J` under `ρ × π_θ`.
pub fn npg_step(policy: &SoftmaxPolicy, rho: &[f64], rewards: &Table, eta: f64) -> Result<SoftmaxPolicy> {
    let f = crate::policy::fisher_matrix(policy, &joint_weights(rho, &policy.prob_table()));
    let delta = pinv_apply(&f, &policy_gradient(policy, rho, rewards))?;
    Ok(policy.step(&delta, eta))
}

/// Sampled NPG: empirical Fisher and gradient means over `batch`.
pub fn npg_batch_step(policy: &SoftmaxPolicy, batch: &[Completion], eta: f64) -> Result<SoftmaxPolicy> {
    if batch.is_empty() {
        return Ok(policy.clone());
    }
    let d = policy.dim();
    let n = batch.len() as f64;
    let mut f = DenseMatrix::zeros(d, d);
    let mut grad = vec![0.0; d];
    for c in batch {
        let g = policy.grad_log_prob(c.x, c.y);
        f.add_outer(1.0 / n, &g, &g);
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += c.reward * b / n);
    }
    let delta = pinv_apply(&f, &grad)?;
    Ok(policy.step(&delta, eta))
}

/// `mean_n ∇ln π(y_n|x_n) r_n`.
pub fn reinforce_direction(policy: &SoftmaxPolicy, batch: &[Completion]) -> Vec<f64> {
    let mut dir = vec![0.0; policy.dim()];
    if batch.is_empty() {
        return dir;
    }
    let n = batch.len() as f64;
    for c in batch {
        if c.reward == 0.0 {
            continue;
        }
        let g = policy.grad_log_prob(c.x, c.y);
        dir.iter_mut().zip(&g).for_each(|(a, b)| *a += c.reward * b / n);
    }
    dir
}

pub fn reinforce_step(policy: &SoftmaxPolicy, batch: &[Completion], lr: f64) -> SoftmaxPolicy {
    policy.step(&reinforce_direction(policy, batch), lr)
}

/// `k` completions sharing one context.
#[derive(Debug, Clone, PartialEq)]
pub struct RlooGroup {
    pub x: usize,
    /// `(y, r)` pairs.
    pub samples: Vec<(usize, f64)>,
}

/// Leave-one-out direction: each sample's reward is baselined by the mean of
/// its `k − 1` siblings; the result is averaged over all samples.
pub fn rloo_direction(policy: &SoftmaxPolicy, groups: &[RlooGroup]) -> Result<Vec<f64>> {
    let mut dir = vec![0.0; policy.dim()];
    let total: usize = groups.iter().map(|g| g.samples.len()).sum();
    for group in groups {
        let k = group.samples.len();
        if k < 2 {
            return Err(Error::InvalidConfig(format!(
                "rloo needs k >= 2 samples per context, got {k}"
            )));
        }
        let sum: f64 = group.samples.iter().map(|(_, r)| r).sum();
        for &(y, r) in &group.samples {
            let baseline = (sum - r) / (k - 1) as f64;
            let coeff = (r - baseline) / total as f64;
            if coeff == 0.0 {
                continue;
            }
            let g = policy.grad_log_prob(group.x, y);
            dir.iter_mut().zip(&g).for_each(|(a, b)| *a += coeff * b);
        }
    }
    Ok(dir)
}

pub fn rloo_step(policy: &SoftmaxPolicy, groups: &[RlooGroup], lr: f64) -> Result<SoftmaxPolicy> {
    Ok(policy.step(&rloo_direction(policy, groups)?, lr))
}

/// Rewards minus the batch mean of rewards sharing the same context.
pub fn batch_mean_advantages(batch: &[Completion], contexts: usize) -> Vec<f64> {
    let mut sum = vec![0.0; contexts];
    let mut count = vec![0usize; contexts];
    for c in batch {
        sum[c.x] += c.reward;
        count[c.x] += 1;
    }
    batch.iter().map(|c| c.reward - sum[c.x] / count[c.x] as f64).collect()
}

/// `mean_n min(ρ_n A_n, clip(ρ_n; 1−ε, 1+ε) A_n)` with `ρ_n = π_θ(y_n)/π_t(y_n)`.
pub fn ppo_surrogate(
    candidate: &SoftmaxPolicy,
    current: &SoftmaxPolicy,
    batch: &[Completion],
    advantages: &[f64],
    epsilon: f64,
) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let total: f64 = batch
        .iter()
        .zip(advantages)
        .map(|(c, a)| {
            let ratio = (candidate.log_prob(c.x, c.y) - current.log_prob(c.x, c.y)).exp();
            (ratio * a).min(ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * a)
        })
        .sum();
    total / batch.len() as f64
}

/// Gradient of [`ppo_surrogate`]; terms where the clamped branch is active
/// contribute nothing.
pub fn ppo_surrogate_grad(
    candidate: &SoftmaxPolicy,
    current: &SoftmaxPolicy,
    batch: &[Completion],
    advantages: &[f64],
    epsilon: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; candidate.dim()];
    if batch.is_empty() {
        return grad;
    }
    let n = batch.len() as f64;
    for (c, &a) in batch.iter().zip(advantages) {
        let ratio = (candidate.log_prob(c.x, c.y) - current.log_prob(c.x, c.y)).exp();
        let clipped = (a > 0.0 && ratio > 1.0 + epsilon) || (a < 0.0 && ratio < 1.0 - epsilon);
        if clipped || a == 0.0 {
            continue;
        }
        let g = candidate.grad_log_prob(c.x, c.y);
        grad.iter_mut().zip(&g).for_each(|(s, b)| *s += a * ratio * b / n);
    }
    grad
}

/// `inner_steps` ascent steps on the clipped surrogate from `θ_t`.
pub fn ppo_clip_step(
    current: &SoftmaxPolicy,
    batch: &[Completion],
    lr: f64,
    epsilon: f64,
    inner_steps: usize,
) -> SoftmaxPolicy {
    let adv = batch_mean_advantages(batch, current.contexts());
    let mut policy = current.clone();
    for _ in 0..inner_steps {
        let g = ppo_surrogate_grad(&policy, current, batch, &adv, epsilon);
        policy = policy.step(&g, lr);
    }
    policy
}

/// `ln(1 + e^u)` without overflow.
fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `sgn` with `sgn(0) = 0`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn dpo_margin(candidate: &SoftmaxPolicy, current: &SoftmaxPolicy, t: &RegressionTriple, beta: f64) -> f64 {
    let ratio = |y| candidate.log_prob(t.x, y) - current.log_prob(t.x, y);
    beta * (ratio(t.y) - ratio(t.y_prime)) * sign(t.target())
}

/// Mean over triples of `−ln σ(β[ln π_θ(y)/π_t(y) − ln π_θ(y')/π_t(y')] sgn(r_y − r_y'))`.
pub fn dpo_loss(candidate: &SoftmaxPolicy, current: &SoftmaxPolicy, triples: &[RegressionTriple], beta: f64) -> f64 {
    if triples.is_empty() {
        return 0.0;
    }
    let total: f64 = triples
        .iter()
        .map(|t| softplus(-dpo_margin(candidate, current, t, beta)))
        .sum();
    total / triples.len() as f64
}

pub fn dpo_grad(
    candidate: &SoftmaxPolicy,
    current: &SoftmaxPolicy,
    triples: &[RegressionTriple],
    beta: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; candidate.dim()];
    if triples.is_empty() {
        return grad;
    }
    let n = triples.len() as f64;
    for t in triples {
        let s = sign(t.target());
        if s == 0.0 || t.y == t.y_prime {
            continue;
        }
        let z = dpo_margin(candidate, current, t, beta);
        let coeff = -sigmoid(-z) * beta * s / n;
        let (fy, fyp) = (candidate.feature(t.x, t.y), candidate.feature(t.x, t.y_prime));
        for ((g, a), b) in grad.iter_mut().zip(fy).zip(fyp) {
            *g += coeff * (a - b);
        }
    }
    grad
}

/// `steps` gradient-descent steps on [`dpo_loss`] from `θ_t`.
pub fn iterative_dpo_step(
    current: &SoftmaxPolicy,
    triples: &[RegressionTriple],
    beta: f64,
    lr: f64,
    steps: usize,
) -> SoftmaxPolicy {
    let mut policy = current.clone();
    for _ in 0..steps {
        let g = dpo_grad(&policy, current, triples, beta);
        policy = policy.step(&g, -lr);
    }
    policy
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineAlgo {
    MdOracle,
    /// `population = true` uses exact expectations instead of a batch.
    Npg {
        population: bool,
    },
    Reinforce,
    Rloo {
        k: usize,
    },
    PpoClip {
        epsilon: f64,
        inner_steps: usize,
    },
    IterativeDpo {
        beta: f64,
        steps: usize,
    },
}

impl BaselineAlgo {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineAlgo::MdOracle => "md",
            BaselineAlgo::Npg { .. } => "npg",
            BaselineAlgo::Reinforce => "reinforce",
            BaselineAlgo::Rloo { .. } => "rloo",
            BaselineAlgo::PpoClip { .. } => "ppo_clip",
            BaselineAlgo::IterativeDpo { .. } => "iter_dpo",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub algo: BaselineAlgo,
    /// `η` for MD and NPG, learning rate otherwise.
    pub eta: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub gamma: f64,
}

impl BaselineConfig {
    pub fn new(algo: BaselineAlgo) -> Self {
        Self {
            algo,
            eta: 1.0,
            iterations: 100,
            batch_size: 64,
            gamma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        match self.algo {
            BaselineAlgo::Rloo { k } if k < 2 => bad(format!("rloo needs k >= 2, got {k}")),
            BaselineAlgo::Rloo { k } if !(2 * self.batch_size).is_multiple_of(k) => bad(format!(
                "rloo k = {k} must divide the per-iteration budget of {} completions",
                2 * self.batch_size
            )),
            BaselineAlgo::PpoClip { epsilon, .. } if !(epsilon > 0.0 && epsilon < 1.0) => {
                bad(format!("ppo epsilon must lie in (0, 1), got {epsilon}"))
            }
            BaselineAlgo::IterativeDpo { beta, .. } if !(beta > 0.0 && beta.is_finite()) => {
                bad(format!("dpo beta must be > 0, got {beta}"))
            }
            _ => Ok(()),
        }
    }
}

pub struct BaselineUpdate {
    config: BaselineConfig,
}

impl BaselineUpdate {
    pub fn new(config: BaselineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }
}

fn sample_completions(
    env: &ContextualBandit,
    probs: &Table,
    rewards: &Table,
    n: usize,
    rng: &mut SeededRng,
) -> Vec<Completion> {
    (0..n)
        .map(|_| {
            let x = env.sample_context(rng);
            let y = sample_categorical(probs.row(x), rng);
            Completion {
                x,
                y,
                reward: rewards.get(x, y),
            }
        })
        .collect()
}

impl PolicyUpdate for BaselineUpdate {
    fn name(&self) -> &'static str {
        self.config.algo.name()
    }

    fn update(&mut self, ctx: &StepContext<'_>, rng: &mut SeededRng) -> Result<UpdateOutcome> {
        let cfg = &self.config;
        let probs = ctx.current.prob_table();
        let rewards = effective_rewards(ctx.env, &probs, &ctx.reference.prob_table(), cfg.gamma)?;
        let budget = 2 * cfg.batch_size;
        let current = ctx.current;

        let (next, loss) = match cfg.algo {
            BaselineAlgo::MdOracle => {
                if !current.is_tabular() {
                    return Err(Error::InvalidConfig("md oracle needs a tabular policy".into()));
                }
                let next = md_oracle_step(&probs, &rewards, cfg.eta);
                (SoftmaxPolicy::tabular_from_probs(&next), None)
            }
            BaselineAlgo::Npg { population: true } => (npg_step(current, ctx.env.rho(), &rewards, cfg.eta)?, None),
            BaselineAlgo::Npg { population: false } => {
                let batch = sample_completions(ctx.env, &probs, &rewards, budget, rng);
                (npg_batch_step(current, &batch, cfg.eta)?, None)
            }
            BaselineAlgo::Reinforce => {
                let batch = sample_completions(ctx.env, &probs, &rewards, budget, rng);
                (reinforce_step(current, &batch, cfg.eta), None)
            }
            BaselineAlgo::Rloo { k } => {
                let groups: Vec<RlooGroup> = (0..budget / k)
                    .map(|_| {
                        let x = ctx.env.sample_context(rng);
                        let samples = (0..k)
                            .map(|_| {
                                let y = sample_categorical(probs.row(x), rng);
                                (y, rewards.get(x, y))
                            })
                            .collect();
                        RlooGroup { x, samples }
                    })
                    .collect();
                (rloo_step(current, &groups, cfg.eta)?, None)
            }
            BaselineAlgo::PpoClip { epsilon, inner_steps } => {
                let batch = sample_completions(ctx.env, &probs, &rewards, budget, rng);
                let next = ppo_clip_step(current, &batch, cfg.eta, epsilon, inner_steps);
                let adv = batch_mean_advantages(&batch, current.contexts());
                let surrogate = ppo_surrogate(&next, current, &batch, &adv, epsilon);
                (next, Some(surrogate))
            }
            BaselineAlgo::IterativeDpo { beta, steps } => {
                let triples: Vec<RegressionTriple> = (0..cfg.batch_size)
                    .map(|_| {
                        let x = ctx.env.sample_context(rng);
                        let y = sample_categorical(probs.row(x), rng);
                        let y_prime = sample_categorical(probs.row(x), rng);
                        RegressionTriple::sampled(x, y, y_prime, rewards.get(x, y), rewards.get(x, y_prime))
                    })
                    .collect();
                let next = iterative_dpo_step(current, &triples, beta, cfg.eta, steps);
                let loss = dpo_loss(&next, current, &triples, beta);
                (next, Some(loss))
            }
        };
        Ok(UpdateOutcome {
            next,
            loss,
            base: probs,
            rewards,
        })
    }
}

pub fn run_baseline(
    env: &ContextualBandit,
    config: &BaselineConfig,
    initial: SoftmaxPolicy,
    rng: &mut SeededRng,
) -> Result<RunOutput> {
    Runner::new(env, BaselineUpdate::new(config.clone())?, initial).run(config.iterations, rng)
}

/// Spread of an estimator around its own mean: `E‖d − E d‖²`.
fn total_variance(samples: &[Vec<f64>]) -> f64 {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mean: Vec<f64> = (0..d).map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / n).collect();
    samples
        .iter()
        .map(|s| s.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceReport {
    pub reinforce: f64,
    pub rloo: f64,
    /// `rloo / reinforce`.
    pub ratio: f64,
}

/// Empirical variance of REINFORCE and RLOO update directions at `policy`
/// over `resamples` batches of `groups` contexts with `k` completions each.
pub fn rloo_variance_ratio(
    env: &ContextualBandit,
    policy: &SoftmaxPolicy,
    k: usize,
    groups: usize,
    resamples: usize,
    rng: &mut SeededRng,
) -> Result<VarianceReport> {
    let probs = policy.prob_table();
    let rewards = env.rewards();
    let mut reinforce = Vec::with_capacity(resamples);
    let mut rloo = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let batch: Vec<RlooGroup> = (0..groups)
            .map(|_| {
                let x = env.sample_context(rng);
                let samples = (0..k)
                    .map(|_| {
                        let y = sample_categorical(probs.row(x), rng);
                        (y, rewards.get(x, y))
                    })
                    .collect();
                RlooGroup { x, samples }
            })
            .collect();
        let flat: Vec<Completion> = batch
            .iter()
            .flat_map(|g| g.samples.iter().map(|&(y, reward)| Completion { x: g.x, y, reward }))
            .collect();
        reinforce.push(reinforce_direction(policy, &flat));
        rloo.push(rloo_direction(policy, &batch)?);
    }
    let (a, b) = (total_variance(&reinforce), total_variance(&rloo));
    Ok(VarianceReport {
        reinforce: a,
        rloo: b,
        ratio: b / a,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OvershootReport {
    pub ppo_kl: f64,
    pub md_kl: f64,
    /// MD step size matched to PPO's first-step logit displacement.
    pub md_eta: f64,
}

/// Two actions, rewards `(1, 0)`, uniform `π_t`, a balanced batch, and an
/// aggressive PPO learning rate. The first inner step already leaves the
/// clip region, so clipping never engages; compares the resulting KL with
/// an MD step of the same first-step logit displacement.
pub fn ppo_overshoot_demo(epsilon: f64, lr: f64, inner_steps: usize) -> OvershootReport {
    let current = SoftmaxPolicy::tabular(1, 2);
    let rewards = Table::from_rows(&[vec![1.0, 0.0]]);
    let batch: Vec<Completion> = (0..8)
        .map(|i| Completion {
            x: 0,
            y: i % 2,
            reward: rewards.get(0, i % 2),
        })
        .collect();
    let ppo = ppo_clip_step(&current, &batch, lr, epsilon, inner_steps);
    let first = ppo_clip_step(&current, &batch, lr, epsilon, 1);
    let moved: f64 = first
        .theta()
        .iter()
        .zip(current.theta())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    // ‖η (r − mean r)‖ for rewards (1, 0) is η / √2.
    let md_eta = moved * 2f64.sqrt();
    let md = SoftmaxPolicy::tabular_from_probs(&md_oracle_step(&current.prob_table(), &rewards, md_eta));
    OvershootReport {
        ppo_kl: policy_kl(&ppo, &current, 0),
        md_kl: policy_kl(&md, &current, 0),
        md_eta,
    }
}

/// Mean KL of every iterate of a run to its predecessor.
pub fn step_kls(rho: &[f64], iterates: &[&SoftmaxPolicy]) -> Vec<f64> {
    iterates.windows(2).map(|w| mean_kl(rho, w[1], w[0])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, seeded_rng};
    use crate::regression::{gauss_newton_step, population_dataset};
    use rand::Rng;

    fn canonical() -> (ContextualBandit, SoftmaxPolicy) {
        (ContextualBandit::canonical(), SoftmaxPolicy::tabular(1, 3))
    }

    fn kl_rows(a: &Table, b: &Table) -> f64 {
        (0..a.contexts())
            .map(|x| crate::policy::kl(a.row(x), b.row(x)))
            .fold(0.0, f64::max)
    }

    #[test]
    fn md_examples() {
        let (env, pi) = canonical();
        let probs = pi.prob_table();
        assert!(kl_rows(&md_oracle_step(&probs, &Table::zeros(1, 3), 1.0), &probs) == 0.0);
        let next = md_oracle_step(&probs, env.rewards(), 1.0);
        for (p, e) in next.row(0).iter().zip([0.50648, 0.30719, 0.18632]) {
            assert!((p - e).abs() < 1e-5);
        }
        let twice = md_oracle_step(&next, env.rewards(), 1.0);
        let once = md_oracle_step(&probs, env.rewards(), 2.0);
        assert!(kl_rows(&twice, &once) <= 1e-12);
    }

    #[test]
    fn md_keeps_zero_mass() {
        let probs = Table::from_rows(&[vec![0.5, 0.5, 0.0]]);
        let next = md_oracle_step(&probs, &Table::from_rows(&[vec![0.0, 0.0, 5.0]]), 1.0);
        assert_eq!(next.get(0, 2), 0.0);
    }

    #[test]
    fn npg_constant_reward_is_still() {
        let pi = SoftmaxPolicy::tabular_from_logits(&Table::from_rows(&[vec![0.2, -0.4, 1.0]]));
        let next = npg_step(&pi, &[1.0], &Table::from_rows(&[vec![3.0; 3]]), 1.0).unwrap();
        for (a, b) in next.theta().iter().zip(pi.theta()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn npg_two_action_logit_gap() {
        let pi = SoftmaxPolicy::tabular(1, 2);
        let next = npg_step(&pi, &[1.0], &Table::from_rows(&[vec![1.0, 0.0]]), 1.0).unwrap();
        let gap = next.theta()[0] - next.theta()[1];
        assert!((gap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn npg_matches_gauss_newton_and_md() {
        let mut rng = seeded_rng(3);
        for _ in 0..30 {
            let env = ContextualBandit::random(&mut rng, 4, 6);
            let logits = Table::from_vec(
                env.contexts(),
                env.actions(),
                (0..env.contexts() * env.actions())
                    .map(|_| rng.random_range(-2.0..2.0))
                    .collect(),
            );
            let pi = SoftmaxPolicy::tabular_from_logits(&logits);
            let eta = rng.random_range(0.1..2.0);
            let npg = npg_step(&pi, env.rho(), env.rewards(), eta).unwrap();

            let probs = pi.prob_table();
            let data = population_dataset(env.rho(), &probs, &probs, env.rewards());
            let gn = gauss_newton_step(&pi, &data, eta).unwrap();
            let npg_delta: Vec<f64> = npg.theta().iter().zip(pi.theta()).map(|(a, b)| (a - b) / eta).collect();
            let scaled: Vec<f64> = gn.iter().map(|v| v / eta).collect();
            let err = crate::numerics::relative_error(&npg_delta, &scaled);
            assert!(err <= 1e-8, "{err} {npg_delta:?} {scaled:?} rho {:?}", env.rho());

            let md = md_oracle_step(&probs, env.rewards(), eta);
            for x in 0..env.contexts() {
                if env.rho()[x] > 0.0 {
                    assert!(crate::policy::kl(&npg.probs(x), md.row(x)) <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn reinforce_zero_reward_is_still() {
        let (_, pi) = canonical();
        let batch = vec![
            Completion {
                x: 0,
                y: 1,
                reward: 0.0
            };
            4
        ];
        assert_eq!(reinforce_step(&pi, &batch, 1.0), pi);
    }

    #[test]
    fn population_gradient_matches_finite_differences() {
        let (env, _) = canonical();
        let pi = SoftmaxPolicy::tabular_from_logits(&Table::from_rows(&[vec![0.3, -0.7, 0.1]]));
        let g = policy_gradient(&pi, env.rho(), env.rewards());
        let fd = finite_diff_grad(
            |t| env.rewards().expect(env.rho(), &pi.with_theta(t.to_vec()).prob_table()),
            pi.theta(),
            1e-5,
        )
        .unwrap();
        for (a, b) in g.iter().zip(fd) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    fn relative_close(a: &[f64], b: &[f64], tol: f64) -> bool {
        crate::numerics::relative_error(a, b) <= tol
    }

    #[test]
    fn reinforce_and_rloo_are_unbiased() {
        let env = ContextualBandit::canonical();
        let pi = SoftmaxPolicy::tabular_from_logits(&Table::from_rows(&[vec![0.3, -0.7, 0.1]]));
        let target = policy_gradient(&pi, env.rho(), env.rewards());
        let probs = pi.prob_table();
        let mut rng = seeded_rng(8);
        let batches = 100_000;
        let mut mean_rf = vec![0.0; 3];
        let mut mean_rl = vec![0.0; 3];
        for _ in 0..batches {
            let samples: Vec<(usize, f64)> = (0..2)
                .map(|_| {
                    let y = sample_categorical(probs.row(0), &mut rng);
                    (y, env.reward(0, y))
                })
                .collect();
            let flat: Vec<Completion> = samples
                .iter()
                .map(|&(y, reward)| Completion { x: 0, y, reward })
                .collect();
            let rf = reinforce_direction(&pi, &flat);
            let rl = rloo_direction(&pi, &[RlooGroup { x: 0, samples }]).unwrap();
            for i in 0..3 {
                mean_rf[i] += rf[i] / batches as f64;
                mean_rl[i] += rl[i] / batches as f64;
            }
        }
        assert!(relative_close(&mean_rf, &target, 0.01), "{mean_rf:?} vs {target:?}");
        assert!(relative_close(&mean_rl, &target, 0.01), "{mean_rl:?} vs {target:?}");
    }

    #[test]
    fn rloo_cases() {
        let (_, pi) = canonical();
        let flat = RlooGroup {
            x: 0,
            samples: vec![(0, 0.7), (1, 0.7), (2, 0.7)],
        };
        assert!(rloo_direction(&pi, &[flat]).unwrap().iter().all(|v| v.abs() < 1e-15));
        assert!(rloo_direction(
            &pi,
            &[RlooGroup {
                x: 0,
                samples: vec![(0, 1.0)]
            }]
        )
        .is_err());

        let pi = SoftmaxPolicy::tabular_from_logits(&Table::from_rows(&[vec![0.3, -0.7, 0.1]]));
        let (y1, r1, y2, r2) = (0, 0.9, 2, 0.2);
        let d = rloo_direction(
            &pi,
            &[RlooGroup {
                x: 0,
                samples: vec![(y1, r1), (y2, r2)],
            }],
        )
        .unwrap();
        let (g1, g2) = (pi.grad_log_prob(0, y1), pi.grad_log_prob(0, y2));
        for i in 0..3 {
            let pair = (g1[i] * (r1 - r2) + g2[i] * (r2 - r1)) / 2.0;
            assert!((d[i] - pair).abs() < 1e-15);
        }
    }

    #[test]
    fn rloo_variance_is_lower_on_canonical() {
        let (env, pi) = canonical();
        let report = rloo_variance_ratio(&env, &pi, 4, 4, 10_000, &mut seeded_rng(2)).unwrap();
        println!("{report:?}");
        assert!(report.ratio <= 1.0, "{report:?}");
    }

    #[test]
    fn ppo_first_step_is_advantage_reinforce() {
        let (env, pi) = canonical();
        let mut rng = seeded_rng(5);
        let batch = sample_completions(&env, &pi.prob_table(), env.rewards(), 16, &mut rng);
        let adv = batch_mean_advantages(&batch, 1);
        let advantaged: Vec<Completion> = batch
            .iter()
            .zip(&adv)
            .map(|(c, a)| Completion { reward: *a, ..*c })
            .collect();
        let ppo = ppo_clip_step(&pi, &batch, 0.5, 0.2, 1);
        let rf = reinforce_step(&pi, &advantaged, 0.5);
        for (a, b) in ppo.theta().iter().zip(rf.theta()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ppo_surrogate_unclipped_inside_region() {
        let (_, pi) = canonical();
        let cand = SoftmaxPolicy::tabular_from_logits(&Table::from_rows(&[vec![0.05, 0.0, -0.05]]));
        let batch: Vec<Completion> = (0..3)
            .map(|y| Completion {
                x: 0,
                y,
                reward: y as f64,
            })
            .collect();
        let adv = batch_mean_advantages(&batch, 1);
        let unclipped: f64 = batch
            .iter()
            .zip(&adv)
            .map(|(c, a)| (cand.log_prob(0, c.y) - pi.log_prob(0, c.y)).exp() * a)
            .sum::<f64>()
            / 3.0;
        assert!((ppo_surrogate(&cand, &pi, &batch, &adv, 0.2) - unclipped).abs() < 1e-15);
    }

    #[test]
    fn ppo_overshoot_is_recorded() {
        let report = ppo_overshoot_demo(0.2, 20.0, 10);
        assert!(report.ppo_kl.is_finite() && report.md_kl.is_finite());
    }

    #[test]
    fn dpo_cases() {
        let (_, pi) = canonical();
        let triples = vec![
            RegressionTriple::sampled(0, 0, 1, 1.0, 0.5),
            RegressionTriple::sampled(0, 2, 1, 0.0, 0.5),
        ];
        assert!((dpo_loss(&pi, &pi, &triples, 0.5) - 2f64.ln()).abs() < 1e-15);
        let cand = SoftmaxPolicy::tabular_from_logits(&Table::from_rows(&[vec![0.3, -0.7, 0.1]]));
        let ties = vec![RegressionTriple::sampled(0, 0, 1, 0.5, 0.5)];
        assert!((dpo_loss(&cand, &pi, &ties, 0.5) - 2f64.ln()).abs() < 1e-15);
        assert!(dpo_grad(&cand, &pi, &ties, 0.5).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dpo_grad_matches_finite_differences() {
        let mut rng = seeded_rng(9);
        for _ in 0..50 {
            let logits =
                |rng: &mut SeededRng| Table::from_vec(2, 4, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
            let cur = SoftmaxPolicy::tabular_from_logits(&logits(&mut rng));
            let cand = SoftmaxPolicy::tabular_from_logits(&logits(&mut rng));
            let triples: Vec<RegressionTriple> = (0..6)
                .map(|_| {
                    RegressionTriple::sampled(
                        rng.random_range(0..2),
                        rng.random_range(0..4),
                        rng.random_range(0..4),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect();
            let beta = rng.random_range(0.1..2.0);
            let g = dpo_grad(&cand, &cur, &triples, beta);
            let fd = finite_diff_grad(
                |t| dpo_loss(&cand.with_theta(t.to_vec()), &cur, &triples, beta),
                cand.theta(),
                1e-5,
            )
            .unwrap();
            for (a, b) in g.iter().zip(fd) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn dpo_steps_reduce_loss() {
        let (_, pi) = canonical();
        let triples = vec![RegressionTriple::sampled(0, 0, 2, 1.0, 0.0)];
        let next = iterative_dpo_step(&pi, &triples, 1.0, 0.5, 20);
        assert!(dpo_loss(&next, &pi, &triples, 1.0) < 2f64.ln());
        assert!(next.probs(0)[0] > next.probs(0)[2]);
    }

    #[test]
    fn config_validation() {
        let mut c = BaselineConfig::new(BaselineAlgo::Rloo { k: 1 });
        assert!(c.validate().is_err());
        c.algo = BaselineAlgo::Rloo { k: 3 };
        c.batch_size = 4;
        assert!(c.validate().is_err());
        c.algo = BaselineAlgo::PpoClip {
            epsilon: 1.5,
            inner_steps: 1,
        };
        assert!(c.validate().is_err());
        c.algo = BaselineAlgo::IterativeDpo { beta: 0.0, steps: 1 };
        assert!(c.validate().is_err());
        c.algo = BaselineAlgo::Reinforce;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn every_algorithm_runs() {
        let (env, pi) = canonical();
        for algo in [
            BaselineAlgo::MdOracle,
            BaselineAlgo::Npg { population: true },
            BaselineAlgo::Npg { population: false },
            BaselineAlgo::Reinforce,
            BaselineAlgo::Rloo { k: 4 },
            BaselineAlgo::PpoClip {
                epsilon: 0.2,
                inner_steps: 4,
            },
            BaselineAlgo::IterativeDpo { beta: 1.0, steps: 4 },
        ] {
            let config = BaselineConfig {
                iterations: 20,
                batch_size: 8,
                eta: 0.5,
                ..BaselineConfig::new(algo)
            };
            let out = run_baseline(&env, &config, pi.clone(), &mut seeded_rng(1)).unwrap();
            assert_eq!(out.records.len(), 20);
            assert!(out.records.iter().all(|r| r.algo == algo.name()));
            let last = out.records.last().unwrap().expected_reward;
            assert!(
                last > out.initial_eval.expected_reward,
                "{} did not improve",
                algo.name()
            );
        }
    }
}
