//! Executable checks of the regression assumption, its error decomposition,
//! the mirror-descent regret lemma, the best-iterate regret bound, and the
//! Gauss-Newton/NPG identities.
//!
//! Every check returns a [`CheckResult`] with `passed` set iff the measured
//! value is within the bound.

use rand::Rng;
use serde::Serialize;

use crate::baselines::{dpo_grad, dpo_loss, md_oracle_step};
use crate::env::ContextualBandit;
use crate::numerics::{finite_diff_grad, norm, pinv_apply, sample_categorical, DenseMatrix, SeededRng};
use crate::policy::{advantage, concentrability, fisher_matrix, joint_weights, kl, log_softmax, SoftmaxPolicy};
use crate::regression::{gauss_newton_step, rebel_grad, rebel_loss, RegressionTriple};
use crate::run::{finite_or_string, RunOutput};
use crate::{Result, Table};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    #[serde(serialize_with = "finite_or_string")]
    pub measured: f64,
    #[serde(serialize_with = "finite_or_string")]
    pub bound: f64,
    pub instance: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl CheckResult {
    /// `passed` iff `measured ≤ bound` (false for NaN).
    pub fn new(name: impl Into<String>, measured: f64, bound: f64, instance: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: measured <= bound,
            measured,
            bound,
            instance: instance.into(),
            notes: Vec::new(),
        }
    }

    pub fn note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("check result serializes")
    }

    /// Folds many results into one named result whose measured value is the
    /// worst margin `measured − bound` (pass iff it is ≤ 0).
    pub fn aggregate(name: impl Into<String>, results: &[CheckResult]) -> Self {
        let failures = results.iter().filter(|r| !r.passed).count();
        let worst = results
            .iter()
            .max_by(|a, b| (a.measured - a.bound).total_cmp(&(b.measured - b.bound)));
        let mut out = match worst {
            Some(w) => CheckResult {
                name: name.into(),
                passed: failures == 0,
                measured: w.measured,
                bound: w.bound,
                instance: format!("{} instances, worst: {}", results.len(), w.instance),
                notes: Vec::new(),
            },
            None => CheckResult::new(name, 0.0, 0.0, "no instances"),
        };
        if failures > 0 {
            out.notes.push(format!("{failures} of {} failed", results.len()));
        }
        out
    }
}

/// One regression step seen from the population: `π_t`, the fitted
/// `π_{t+1}`, the base distribution `μ`, and the rewards it regressed on.
#[derive(Debug, Clone, Copy)]
pub struct RegressionStep<'a> {
    pub rho: &'a [f64],
    pub current: &'a SoftmaxPolicy,
    pub next: &'a SoftmaxPolicy,
    pub base: &'a Table,
    pub rewards: &'a Table,
    pub eta: f64,
}

/// The three non-negative pieces of the regression error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorDecomposition {
    pub epsilon: f64,
    /// `E_x E_{y∼π_t} (Δ − Δ_π)²`.
    pub on_policy: f64,
    /// `E_x E_{y∼μ} (Δ − Δ_μ)²`.
    pub base: f64,
    /// `E_x (Δ_π − Δ_μ)²`.
    pub cross: f64,
}

impl RegressionStep<'_> {
    /// `f_t(x, y) = (1/η) ln(π_{t+1}(y|x)/π_t(y|x))`.
    pub fn implied_reward(&self) -> Table {
        let (c, a) = (self.current.contexts(), self.current.actions());
        let mut f = Table::zeros(c, a);
        for x in 0..c {
            let (next, cur) = (self.next.log_probs(x), self.current.log_probs(x));
            for y in 0..a {
                f.set(x, y, (next[y] - cur[y]) / self.eta);
            }
        }
        f
    }

    /// `Δ = f_t − r`.
    pub fn residual(&self) -> Table {
        let f = self.implied_reward();
        let (c, a) = f.shape();
        let values = f
            .values()
            .iter()
            .zip(self.rewards.values())
            .map(|(f, r)| f - r)
            .collect();
        Table::from_vec(c, a, values)
    }

    /// Population regression error
    /// `E_{x∼ρ, y∼π_t, y'∼μ} ((f_t(y) − f_t(y')) − (r(y) − r(y')))²`.
    pub fn epsilon(&self) -> f64 {
        let delta = self.residual();
        let mut total = 0.0;
        for (x, &w) in self.rho.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let pi = self.current.probs(x);
            let row = delta.row(x);
            for (y, p) in pi.iter().enumerate() {
                for (y2, m) in self.base.row(x).iter().enumerate() {
                    let e = row[y] - row[y2];
                    total += w * p * m * e * e;
                }
            }
        }
        total
    }

    pub fn decomposition(&self) -> ErrorDecomposition {
        let delta = self.residual();
        let (mut on_policy, mut base, mut cross) = (0.0, 0.0, 0.0);
        for (x, &w) in self.rho.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let pi = self.current.probs(x);
            let mu = self.base.row(x);
            let row = delta.row(x);
            let d_pi: f64 = pi.iter().zip(row).map(|(p, d)| p * d).sum();
            let d_mu: f64 = mu.iter().zip(row).map(|(m, d)| m * d).sum();
            on_policy += w * pi.iter().zip(row).map(|(p, d)| p * (d - d_pi).powi(2)).sum::<f64>();
            base += w * mu.iter().zip(row).map(|(m, d)| m * (d - d_mu).powi(2)).sum::<f64>();
            cross += w * (d_pi - d_mu).powi(2);
        }
        ErrorDecomposition {
            epsilon: self.epsilon(),
            on_policy,
            base,
            cross,
        }
    }

    /// `A_t = g_t − E_{π_t} g_t` with `g_t = r + Δ − Δ_μ`.
    pub fn advantages(&self) -> Table {
        let delta = self.residual();
        let (c, a) = (self.current.contexts(), self.current.actions());
        let mut out = Table::zeros(c, a);
        for x in 0..c {
            let row = delta.row(x);
            let d_mu: f64 = self.base.row(x).iter().zip(row).map(|(m, d)| m * d).sum();
            let g: Vec<f64> = (0..a).map(|y| self.rewards.get(x, y) + row[y] - d_mu).collect();
            out.row_mut(x).copy_from_slice(&advantage(&g, &self.current.probs(x)));
        }
        out
    }
}

fn describe(step: &RegressionStep<'_>) -> String {
    format!(
        "contexts={} actions={} eta={}",
        step.current.contexts(),
        step.current.actions(),
        step.eta
    )
}

/// Measured regression error, passing when it is at most `tolerance`
/// (always passes without one; the value is the report).
pub fn check_regression_epsilon(step: &RegressionStep<'_>, tolerance: Option<f64>) -> CheckResult {
    let eps = step.epsilon();
    CheckResult::new(
        "regression_epsilon",
        eps,
        tolerance.unwrap_or(f64::INFINITY),
        describe(step),
    )
}

/// The three pieces sum to ε (within 1e-12) and none exceeds it.
pub fn check_lemma1_decomposition(step: &RegressionStep<'_>) -> CheckResult {
    let d = step.decomposition();
    let scale = d.epsilon.max(1.0);
    let gap = (d.on_policy + d.base + d.cross - d.epsilon).abs();
    let mut r = CheckResult::new("lemma1_decomposition", gap, 1e-12 * scale, describe(step)).note(format!(
        "epsilon={:e} on_policy={:e} base={:e} cross={:e}",
        d.epsilon, d.on_policy, d.base, d.cross
    ));
    let slack = 1e-12 * scale;
    if [d.on_policy, d.base, d.cross].iter().any(|t| *t > d.epsilon + slack) {
        r.passed = false;
        r.notes.push("a term exceeds epsilon".into());
    }
    r
}

/// One [`RegressionStep`] per update of `run`.
pub fn run_steps<'a>(run: &'a RunOutput, rho: &'a [f64], eta: f64) -> Vec<RegressionStep<'a>> {
    let iterates: Vec<&SoftmaxPolicy> = run.iterates().collect();
    run.traces
        .iter()
        .enumerate()
        .map(|(t, trace)| RegressionStep {
            rho,
            current: &trace.policy,
            next: iterates[t + 1],
            base: &trace.base,
            rewards: &trace.rewards,
            eta,
        })
        .collect()
}

/// `A_0, ..., A_{T−1}` of a run.
pub fn iterate_advantages(run: &RunOutput, rho: &[f64], eta: f64) -> Vec<Table> {
    run_steps(run, rho, eta).iter().map(|s| s.advantages()).collect()
}

/// `π_{t+1} ∝ π_t exp(η A_t)` reproduces every iterate (max per-context KL ≤ 1e-9).
pub fn check_reparameterization(run: &RunOutput, rho: &[f64], eta: f64) -> CheckResult {
    let mut worst: f64 = 0.0;
    for step in run_steps(run, rho, eta) {
        let adv = step.advantages();
        for x in 0..step.current.contexts() {
            let logits: Vec<f64> = step
                .current
                .log_probs(x)
                .iter()
                .zip(adv.row(x))
                .map(|(l, a)| l + eta * a)
                .collect();
            let rebuilt: Vec<f64> = log_softmax(&logits).into_iter().map(f64::exp).collect();
            worst = worst.max(kl(&step.next.probs(x), &rebuilt));
        }
    }
    CheckResult::new(
        "reparameterization",
        worst,
        1e-9,
        format!("T={} eta={eta}", run.traces.len()),
    )
}

fn largest_abs(tables: &[Table]) -> f64 {
    tables.iter().map(Table::max_abs).fold(0.0, f64::max)
}

/// `max_x Σ_t E_{y∼π(·|x)} A_t(x, y) ≤ ln|Y|/η + T η A²`.
///
/// `A` is the realized `max_t |A_t|`, or `a_bound` when given (a bound below
/// the realized value is replaced and noted). With `η = √(ln|Y|/(A²T))` the
/// bound equals `2A√(ln|Y| T)`.
pub fn check_lemma2_regret(
    advantages: &[Table],
    initial: &Table,
    comparator: &Table,
    eta: f64,
    a_bound: Option<f64>,
) -> CheckResult {
    let t = advantages.len();
    let actions = comparator.actions();
    let ln_y = (actions as f64).ln();
    let realized = largest_abs(advantages);
    let mut notes = Vec::new();
    let a = match a_bound {
        Some(b) if b >= realized => b,
        Some(b) => {
            notes.push(format!(
                "supplied A={b} is below realized max|A_t|={realized}; using realized"
            ));
            realized
        }
        None => realized,
    };

    let lhs = (0..comparator.contexts())
        .map(|x| {
            advantages
                .iter()
                .map(|adv| {
                    comparator
                        .row(x)
                        .iter()
                        .zip(adv.row(x))
                        .map(|(p, v)| p * v)
                        .sum::<f64>()
                })
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let lhs = if t == 0 { 0.0 } else { lhs };
    let bound = if t == 0 {
        0.0
    } else {
        ln_y / eta + t as f64 * eta * a * a
    };

    if eta * a > 1.0 {
        notes.push(format!("eta*A = {} > 1: outside the lemma's hypothesis", eta * a));
    }
    if t > 0 && a > 0.0 {
        let prescribed = (ln_y / (a * a * t as f64)).sqrt();
        if (eta - prescribed).abs() > 1e-12 * prescribed {
            notes.push(format!("eta={eta} differs from the prescribed {prescribed}"));
        } else {
            notes.push(format!("2A*sqrt(ln|Y|*T) = {}", 2.0 * a * (ln_y * t as f64).sqrt()));
        }
    }
    let uniform = initial
        .rows()
        .all(|row| row.iter().all(|p| (p - 1.0 / actions as f64).abs() <= 1e-12));
    if !uniform {
        notes.push("initial policy is not uniform; ln|Y| no longer bounds KL(pi||pi_0)".into());
    }
    let mut r = CheckResult::new(
        "lemma2_regret",
        lhs,
        bound,
        format!("T={t} actions={actions} eta={eta} A={a}"),
    );
    r.notes = notes;
    r
}

/// Everything the best-iterate bound is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretReport {
    /// `min_{t < T} E_{π*} r − E_{π_t} r`.
    pub best_suboptimality: f64,
    pub best_iterate: usize,
    pub epsilon: f64,
    pub concentrability: f64,
    pub a: f64,
    pub bound: f64,
}

/// Best-iterate suboptimality against
/// `ln|Y|/(ηT) + ηA² + √(10 C ε)` with `C = max_t C_{μ_t→π*}` and
/// `ε = max_t ε_t`. The first two terms equal `2A√(ln|Y|/T)` at the
/// prescribed `η`.
pub fn theorem1_report(
    run: &RunOutput,
    env: &ContextualBandit,
    comparator: &Table,
    eta: f64,
    a_bound: Option<f64>,
) -> RegretReport {
    let steps = run_steps(run, env.rho(), eta);
    let t = steps.len();
    let target = env.rewards().expect(env.rho(), comparator);
    let (best_iterate, best_suboptimality) = steps
        .iter()
        .map(|s| target - env.rewards().expect(env.rho(), &s.current.prob_table()))
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    let epsilon = steps.iter().map(|s| s.epsilon()).fold(0.0, f64::max);
    let concentrability = steps
        .iter()
        .map(|s| concentrability(comparator, s.base))
        .fold(0.0, f64::max);
    let advantages: Vec<Table> = steps.iter().map(|s| s.advantages()).collect();
    let a = largest_abs(&advantages).max(a_bound.unwrap_or(0.0));
    let ln_y = (comparator.actions() as f64).ln();
    let shift = if epsilon == 0.0 {
        0.0
    } else {
        (10.0 * concentrability * epsilon).sqrt()
    };
    let bound = if t == 0 || concentrability.is_infinite() {
        f64::INFINITY
    } else {
        ln_y / (eta * t as f64) + eta * a * a + shift
    };
    RegretReport {
        best_suboptimality,
        best_iterate,
        epsilon,
        concentrability,
        a,
        bound,
    }
}

pub fn check_theorem1_regret(
    run: &RunOutput,
    env: &ContextualBandit,
    comparator: &Table,
    eta: f64,
    a_bound: Option<f64>,
) -> CheckResult {
    let rep = theorem1_report(run, env, comparator, eta, a_bound);
    let mut r = CheckResult::new(
        "theorem1_regret",
        rep.best_suboptimality,
        rep.bound,
        format!(
            "T={} contexts={} actions={} eta={eta}",
            run.traces.len(),
            env.contexts(),
            env.actions()
        ),
    )
    .note(format!(
        "epsilon={:e} C={} A={} best_iterate={}",
        rep.epsilon, rep.concentrability, rep.a, rep.best_iterate
    ));
    if rep.bound.is_infinite() {
        r.notes
            .push("bound vacuous (no iterations or infinite concentrability)".into());
    }
    if eta * rep.a > 1.0 {
        r.notes
            .push(format!("eta*A = {} > 1: outside the lemma's hypothesis", eta * rep.a));
    }
    r
}

/// `max_{t,x} KL(π_t^{REBEL} || π_t^{MD})` over a whole run.
pub fn md_trajectory_gap(run: &RunOutput, env: &ContextualBandit, eta: f64) -> f64 {
    let mut md = run.traces.first().map(|t| t.policy.prob_table());
    let mut worst: f64 = 0.0;
    for pi in run.iterates().skip(1) {
        let next = md_oracle_step(md.as_ref().expect("non-empty run"), env.rewards(), eta);
        let table = pi.prob_table();
        for x in 0..env.contexts() {
            worst = worst.max(kl(table.row(x), next.row(x)));
        }
        md = Some(next);
    }
    worst
}

/// Exact-solver monotone improvement (`E r(π_{t+1}) ≥ E r(π_t) − 1e-12`)
/// and conservativity (`max_x KL(π_{t+1}||π_t) ≤ 2ηR`).
pub fn check_improvement_and_conservativity(
    run: &RunOutput,
    env: &ContextualBandit,
    eta: f64,
) -> (CheckResult, CheckResult) {
    let iterates: Vec<&SoftmaxPolicy> = run.iterates().collect();
    let rewards = env.rewards();
    let mut worst_drop: f64 = f64::NEG_INFINITY;
    let mut worst_kl_margin: f64 = f64::NEG_INFINITY;
    let mut worst_kl = 0.0;
    let limit = 2.0 * eta * env.reward_bound();
    for w in iterates.windows(2) {
        let before = rewards.expect(env.rho(), &w[0].prob_table());
        let after = rewards.expect(env.rho(), &w[1].prob_table());
        worst_drop = worst_drop.max(before - after);
        let step = (0..env.contexts())
            .map(|x| kl(&w[1].probs(x), &w[0].probs(x)))
            .fold(0.0, f64::max);
        if step - limit > worst_kl_margin {
            worst_kl_margin = step - limit;
            worst_kl = step;
        }
    }
    let desc = format!(
        "T={} contexts={} actions={} eta={eta}",
        run.traces.len(),
        env.contexts(),
        env.actions()
    );
    let drop = if iterates.len() < 2 { 0.0 } else { worst_drop };
    (
        CheckResult::new("monotone_improvement", drop, 1e-12, desc.clone()),
        CheckResult::new("conservativity", worst_kl, limit, desc),
    )
}

/// Signature of a Gauss-Newton solver, so checks can be pointed at a
/// deliberately broken one.
pub type GaussNewtonFn = dyn Fn(&SoftmaxPolicy, &[RegressionTriple], f64) -> Result<Vec<f64>>;

/// A random small instance: `ρ`, `π_t`, `μ`, rewards and `η`.
#[derive(Debug, Clone)]
pub struct ClaimInstance {
    pub rho: Vec<f64>,
    pub policy: SoftmaxPolicy,
    pub base: Table,
    pub rewards: Table,
    pub eta: f64,
}

impl ClaimInstance {
    /// At most 4 contexts and 6 actions; tabular or linear features.
    pub fn random(rng: &mut SeededRng) -> Self {
        let contexts = rng.random_range(1..=4);
        let actions = rng.random_range(2..=6);
        let raw: Vec<f64> = (0..contexts).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let rho = raw.iter().map(|v| v / total).collect();
        let policy = if rng.random_bool(0.5) {
            let logits = Table::from_vec(
                contexts,
                actions,
                (0..contexts * actions).map(|_| rng.random_range(-2.0..2.0)).collect(),
            );
            SoftmaxPolicy::tabular_from_logits(&logits)
        } else {
            let dim = rng.random_range(1..=5);
            let phi = (0..contexts * actions * dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let theta = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            SoftmaxPolicy::linear(contexts, actions, dim, phi, theta).expect("consistent shapes")
        };
        let base = if rng.random_bool(0.25) {
            policy.prob_table()
        } else {
            let mut t = Table::zeros(contexts, actions);
            for x in 0..contexts {
                let w: Vec<f64> = (0..actions).map(|_| rng.random_range(-2.0f64..2.0).exp()).collect();
                let s: f64 = w.iter().sum();
                t.row_mut(x).iter_mut().zip(w).for_each(|(o, v)| *o = v / s);
            }
            t
        };
        let rewards = Table::from_vec(
            contexts,
            actions,
            (0..contexts * actions).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        Self {
            rho,
            policy,
            base,
            rewards,
            eta: rng.random_range(0.1..2.0),
        }
    }

    fn describe(&self) -> String {
        format!(
            "contexts={} actions={} dim={} {} eta={:.4}",
            self.policy.contexts(),
            self.policy.actions(),
            self.policy.dim(),
            if self.policy.is_tabular() { "tabular" } else { "linear" },
            self.eta
        )
    }

    /// `η F† E_{x∼ρ, y∼π_mix}[∇ln π_t(y|x) A^{π_t}(x, y)]` with `F` over
    /// `π_mix = (π_t + μ)/2`.
    pub fn npg_form(&self) -> Result<Vec<f64>> {
        let probs = self.policy.prob_table();
        let mix = probs.mix(&self.base, 0.5);
        let f = fisher_matrix(&self.policy, &joint_weights(&self.rho, &mix));
        let mut rhs = vec![0.0; self.policy.dim()];
        for (x, &w) in self.rho.iter().enumerate() {
            let adv = advantage(self.rewards.row(x), probs.row(x));
            for (y, g) in self.policy.grad_log_probs(x).iter().enumerate() {
                let c = w * mix.get(x, y) * adv[y];
                rhs.iter_mut().zip(g).for_each(|(r, v)| *r += c * v);
            }
        }
        Ok(pinv_apply(&f, &rhs)?.into_iter().map(|v| self.eta * v).collect())
    }

    /// Population dataset with weights `ρ(x) π_t(y|x) μ(y'|x)`.
    pub fn population(&self) -> Vec<RegressionTriple> {
        crate::regression::population_dataset(&self.rho, &self.policy.prob_table(), &self.base, &self.rewards)
    }

    /// `n` sampled triples `x ∼ ρ, y ∼ π_t, y' ∼ μ`.
    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Vec<RegressionTriple> {
        let probs = self.policy.prob_table();
        (0..n)
            .map(|_| {
                let x = sample_categorical(&self.rho, rng);
                let y = sample_categorical(probs.row(x), rng);
                let y_prime = sample_categorical(self.base.row(x), rng);
                RegressionTriple::sampled(x, y, y_prime, self.rewards.get(x, y), self.rewards.get(x, y_prime))
            })
            .collect()
    }
}

/// `η F̃† (1/2N) Σ_n [∇ln π(y_n)(r_n − r'_n) + ∇ln π(y'_n)(r'_n − r_n)]` with
/// `F̃ = (1/2N) Σ_n (∇ln π(y_n) − ∇ln π(y'_n))(∇ln π(y_n) − ∇ln π(y'_n))ᵀ`.
pub fn finite_sample_form(policy: &SoftmaxPolicy, data: &[RegressionTriple], eta: f64) -> Result<Vec<f64>> {
    let d = policy.dim();
    let scale = 1.0 / (2.0 * data.len().max(1) as f64);
    let mut f = DenseMatrix::zeros(d, d);
    let mut rhs = vec![0.0; d];
    for t in data {
        let (g, g2) = (policy.grad_log_prob(t.x, t.y), policy.grad_log_prob(t.x, t.y_prime));
        let diff: Vec<f64> = g.iter().zip(&g2).map(|(a, b)| a - b).collect();
        f.add_outer(scale, &diff, &diff);
        let dr = t.r_y - t.r_y_prime;
        for ((r, a), b) in rhs.iter_mut().zip(&g).zip(&g2) {
            *r += scale * (a * dr - b * dr);
        }
    }
    Ok(pinv_apply(&f, &rhs)?.into_iter().map(|v| eta * v).collect())
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish (below 1e-12 absolute).
fn agreement(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if norm(&diff) <= 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Population Gauss-Newton step versus the mixture-Fisher NPG form.
pub fn check_claim1(inst: &ClaimInstance, gauss_newton: &GaussNewtonFn) -> Result<CheckResult> {
    let gn = gauss_newton(&inst.policy, &inst.population(), inst.eta)?;
    let npg = inst.npg_form()?;
    Ok(CheckResult::new(
        "claim1_population_identity",
        agreement(&gn, &npg),
        1e-8,
        inst.describe(),
    ))
}

/// Sampled Gauss-Newton step versus the paired-score closed form.
pub fn check_claim2(
    inst: &ClaimInstance,
    n: usize,
    gauss_newton: &GaussNewtonFn,
    rng: &mut SeededRng,
) -> Result<CheckResult> {
    let data = inst.sample(n, rng);
    let gn = gauss_newton(&inst.policy, &data, inst.eta)?;
    let closed = finite_sample_form(&inst.policy, &data, inst.eta)?;
    Ok(CheckResult::new(
        "claim2_finite_sample_identity",
        agreement(&gn, &closed),
        1e-8,
        format!("{} N={n}", inst.describe()),
    ))
}

/// `instances` random cases of both identities, using `gauss_newton`.
pub fn check_claims_with(
    rng: &mut SeededRng,
    instances: usize,
    gauss_newton: &GaussNewtonFn,
) -> Result<Vec<CheckResult>> {
    let mut out = Vec::with_capacity(2 * instances);
    for _ in 0..instances {
        let inst = ClaimInstance::random(rng);
        out.push(check_claim1(&inst, gauss_newton)?);
        let n = rng.random_range(1..=64);
        out.push(check_claim2(&inst, n, gauss_newton, rng)?);
    }
    Ok(out)
}

pub fn check_claims(rng: &mut SeededRng, instances: usize) -> Result<Vec<CheckResult>> {
    check_claims_with(rng, instances, &gauss_newton_step)
}

fn random_pair(rng: &mut SeededRng) -> (SoftmaxPolicy, SoftmaxPolicy) {
    let inst = ClaimInstance::random(rng);
    let theta: Vec<f64> = inst
        .policy
        .theta()
        .iter()
        .map(|t| t + rng.random_range(-0.5..0.5))
        .collect();
    (inst.policy.with_theta(theta), inst.policy)
}

fn random_triples(policy: &SoftmaxPolicy, n: usize, rng: &mut SeededRng) -> Vec<RegressionTriple> {
    (0..n)
        .map(|_| {
            RegressionTriple::sampled(
                rng.random_range(0..policy.contexts()),
                rng.random_range(0..policy.actions()),
                rng.random_range(0..policy.actions()),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect()
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Analytic gradients of the regression loss, the DPO loss and `ln π`
/// against central differences (`h = 1e-5`, tolerance 1e-5).
pub fn check_gradients(rng: &mut SeededRng, instances: usize) -> Result<Vec<CheckResult>> {
    let h = 1e-5;
    let (mut loss, mut dpo, mut logp) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..instances {
        let (candidate, current) = random_pair(rng);
        let data = random_triples(&candidate, rng.random_range(1..=16), rng);
        let eta = rng.random_range(0.2..2.0);
        let desc = format!("dim={} n={} eta={eta:.3}", candidate.dim(), data.len());

        let g = rebel_grad(&candidate, &current, &data, eta)?;
        let fd = finite_diff_grad(
            |t| rebel_loss(&candidate.with_theta(t.to_vec()), &current, &data, eta).unwrap_or(f64::NAN),
            candidate.theta(),
            h,
        )?;
        loss.push(CheckResult::new(
            "grad_rebel_loss",
            max_gap(&g, &fd),
            1e-5,
            desc.clone(),
        ));

        let beta = rng.random_range(0.1..2.0);
        let g = dpo_grad(&candidate, &current, &data, beta);
        let fd = finite_diff_grad(
            |t| dpo_loss(&candidate.with_theta(t.to_vec()), &current, &data, beta),
            candidate.theta(),
            h,
        )?;
        dpo.push(CheckResult::new("grad_dpo_loss", max_gap(&g, &fd), 1e-5, desc.clone()));

        let x = rng.random_range(0..candidate.contexts());
        let y = rng.random_range(0..candidate.actions());
        let g = candidate.grad_log_prob(x, y);
        let fd = finite_diff_grad(
            |t| candidate.with_theta(t.to_vec()).log_prob(x, y),
            candidate.theta(),
            h,
        )?;
        logp.push(CheckResult::new("grad_log_prob", max_gap(&g, &fd), 1e-5, desc));
    }
    Ok(vec![
        CheckResult::aggregate("grad_rebel_loss", &loss),
        CheckResult::aggregate("grad_dpo_loss", &dpo),
        CheckResult::aggregate("grad_log_prob", &logp),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use crate::regression::{
        population_dataset, run_rebel, solve_regression_exact_tabular, solve_regression_gd, RebelConfig, Solver,
    };

    #[test]
    fn epsilon_after_exact_solve_vanishes() {
        let env = ContextualBandit::canonical();
        let cur = SoftmaxPolicy::tabular(1, 3);
        let next = solve_regression_exact_tabular(&cur, env.rewards(), 1.0).unwrap();
        let base = cur.prob_table();
        let step = RegressionStep {
            rho: env.rho(),
            current: &cur,
            next: &next,
            base: &base,
            rewards: env.rewards(),
            eta: 1.0,
        };
        assert!(step.epsilon() <= 1e-18);
        let d = step.decomposition();
        assert!(d.on_policy <= 1e-16 && d.base <= 1e-16 && d.cross <= 1e-16);
        assert!(check_lemma1_decomposition(&step).passed);
    }

    #[test]
    fn epsilon_without_update_is_reward_spread() {
        let env = ContextualBandit::canonical();
        let cur = SoftmaxPolicy::tabular(1, 3);
        let base = cur.prob_table();
        let step = RegressionStep {
            rho: env.rho(),
            current: &cur,
            next: &cur,
            base: &base,
            rewards: env.rewards(),
            eta: 1.0,
        };
        let r = [1.0, 0.5, 0.0];
        let expected: f64 = r
            .iter()
            .flat_map(|a| r.iter().map(move |b| (a - b) * (a - b) / 9.0))
            .sum();
        assert!((step.epsilon() - expected).abs() < 1e-15);
        let constant = Table::from_rows(&[vec![0.3; 3]]);
        let flat = RegressionStep {
            rewards: &constant,
            ..step
        };
        let d = flat.decomposition();
        assert_eq!((d.epsilon, d.on_policy, d.base, d.cross), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn gd_solver_epsilon_is_small() {
        let env = ContextualBandit::canonical();
        let cur = SoftmaxPolicy::tabular(1, 3);
        let probs = cur.prob_table();
        let data = population_dataset(env.rho(), &probs, &probs, env.rewards());
        let step_size = crate::regression::default_step_size(&cur, &data, 1.0);
        let next = solve_regression_gd(&cur, &data, 1.0, 500, step_size).unwrap().policy;
        let step = RegressionStep {
            rho: env.rho(),
            current: &cur,
            next: &next,
            base: &probs,
            rewards: env.rewards(),
            eta: 1.0,
        };
        assert!(check_regression_epsilon(&step, Some(1e-6)).passed);
    }

    #[test]
    fn decomposition_sums_on_random_steps() {
        let mut rng = seeded_rng(21);
        for _ in 0..200 {
            let inst = ClaimInstance::random(&mut rng);
            let theta: Vec<f64> = inst
                .policy
                .theta()
                .iter()
                .map(|t| t + rng.random_range(-1.0..1.0))
                .collect();
            let next = inst.policy.with_theta(theta);
            let step = RegressionStep {
                rho: &inst.rho,
                current: &inst.policy,
                next: &next,
                base: &inst.base,
                rewards: &inst.rewards,
                eta: inst.eta,
            };
            let r = check_lemma1_decomposition(&step);
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn lemma2_trivial_case() {
        let zero = vec![Table::zeros(1, 3)];
        let r = check_lemma2_regret(
            &zero,
            &Table::uniform(1, 3),
            &Table::deterministic(3, &[0]),
            1.0,
            Some(1.0),
        );
        assert!(r.passed);
        assert_eq!(r.measured, 0.0);
    }

    #[test]
    fn lemma2_and_theorem1_on_canonical() {
        let env = ContextualBandit::canonical();
        let t = 100;
        let a = env.reward_spread();
        let eta = (3f64.ln() / (a * a * t as f64)).sqrt();
        let config = RebelConfig {
            eta,
            iterations: t,
            ..RebelConfig::default()
        };
        let run = run_rebel(&env, &config, SoftmaxPolicy::tabular(1, 3), &mut seeded_rng(0)).unwrap();
        let adv = iterate_advantages(&run, env.rho(), eta);
        let star = env.optimal_policy();
        let r = check_lemma2_regret(&adv, &Table::uniform(1, 3), &star, eta, Some(a));
        assert!(r.passed, "{r:?}");
        assert!((r.bound - 2.0 * a * (3f64.ln() * t as f64).sqrt()).abs() < 1e-9);
        assert!(check_reparameterization(&run, env.rho(), eta).passed);
    }

    #[test]
    fn theorem1_exact_long_run() {
        let env = ContextualBandit::canonical();
        let t = 400;
        let a = env.reward_spread();
        let eta = (3f64.ln() / (a * a * t as f64)).sqrt();
        let config = RebelConfig {
            eta,
            iterations: t,
            ..RebelConfig::default()
        };
        let run = run_rebel(&env, &config, SoftmaxPolicy::tabular(1, 3), &mut seeded_rng(0)).unwrap();
        let rep = theorem1_report(&run, &env, &env.optimal_policy(), eta, Some(a));
        assert!(rep.epsilon <= 1e-18);
        assert!((rep.bound - 2.0 * a * (3f64.ln() / t as f64).sqrt()).abs() < 1e-9);
        assert!(rep.best_suboptimality <= rep.bound);

        let self_cmp = check_theorem1_regret(&run, &env, &Table::uniform(1, 3), eta, Some(a));
        assert!(self_cmp.passed);
    }

    #[test]
    fn theorem1_holds_for_corrupted_solver() {
        let env = ContextualBandit::canonical();
        let config = RebelConfig {
            eta: 0.3,
            iterations: 40,
            batch_size: 4,
            solver: Solver::GradDescent {
                steps: 3,
                step_size: None,
            },
            ..RebelConfig::default()
        };
        let run = run_rebel(&env, &config, SoftmaxPolicy::tabular(1, 3), &mut seeded_rng(1)).unwrap();
        let r = check_theorem1_regret(&run, &env, &env.optimal_policy(), 0.3, None);
        assert!(r.passed, "{r:?}");
        let rep = theorem1_report(&run, &env, &env.optimal_policy(), 0.3, None);
        assert!(rep.epsilon > 1e-4);
    }

    #[test]
    fn claims_hold() {
        let results = check_claims(&mut seeded_rng(5), 40).unwrap();
        for r in &results {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn claims_catch_sign_error() {
        let flipped = |p: &SoftmaxPolicy, d: &[RegressionTriple], eta: f64| -> Result<Vec<f64>> {
            Ok(gauss_newton_step(p, d, eta)?.into_iter().map(|v| -v).collect())
        };
        let results = check_claims_with(&mut seeded_rng(5), 10, &flipped).unwrap();
        assert!(results.iter().any(|r| !r.passed));
    }

    #[test]
    fn degenerate_claim_cases_vanish() {
        let pi = SoftmaxPolicy::tabular_from_probs(&Table::from_rows(&[vec![0.0, 1.0, 0.0]]));
        let inst = ClaimInstance {
            rho: vec![1.0],
            base: pi.prob_table(),
            policy: pi,
            rewards: Table::from_rows(&[vec![1.0, 0.5, 0.0]]),
            eta: 1.0,
        };
        assert!(norm(&inst.npg_form().unwrap()) < 1e-12);
        assert!(norm(&gauss_newton_step(&inst.policy, &inst.population(), 1.0).unwrap()) < 1e-12);

        let mut rng = seeded_rng(2);
        let mut inst = ClaimInstance::random(&mut rng);
        inst.rewards = inst.rewards.map(|_| 0.4);
        assert!(norm(&inst.npg_form().unwrap()) < 1e-12);
        let data = inst.sample(16, &mut rng);
        assert!(norm(&finite_sample_form(&inst.policy, &data, inst.eta).unwrap()) < 1e-12);
    }

    #[test]
    fn gradient_checks_pass() {
        for r in check_gradients(&mut seeded_rng(3), 30).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn improvement_and_conservativity() {
        let mut rng = seeded_rng(8);
        for _ in 0..10 {
            let env = ContextualBandit::random(&mut rng, 4, 6);
            let eta = rng.random_range(0.1..3.0);
            let config = RebelConfig {
                eta,
                iterations: 30,
                ..RebelConfig::default()
            };
            let init = SoftmaxPolicy::tabular(env.contexts(), env.actions());
            let run = run_rebel(&env, &config, init, &mut rng).unwrap();
            let (mono, cons) = check_improvement_and_conservativity(&run, &env, eta);
            assert!(mono.passed && cons.passed, "{mono:?} {cons:?}");
            assert!(md_trajectory_gap(&run, &env, eta) <= 1e-10);
        }
    }

    #[test]
    fn result_lines_are_json() {
        let r = CheckResult::new("x", f64::INFINITY, 1.0, "i").note("n");
        assert!(!r.passed);
        assert_eq!(
            r.to_json_line(),
            r#"{"name":"x","passed":false,"measured":"inf","bound":1.0,"instance":"i","notes":["n"]}"#
        );
        assert!(!CheckResult::new("nan", f64::NAN, 1.0, "").passed);
    }
}
