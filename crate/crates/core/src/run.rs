//! Generic iteration driver shared by every algorithm.
//!
//! An algorithm implements [`PolicyUpdate`]; [`Runner`] owns the iterate
//! sequence and turns each update into a [`RunRecord`]. Records are indexed
//! `t = 1..=T` and describe `π_t`, the policy produced by update `t`.

use serde::{Deserialize, Serialize, Serializer};

use crate::env::ContextualBandit;
use crate::numerics::SeededRng;
use crate::policy::{mean_kl, SoftmaxPolicy};
use crate::selfplay::duality_gap;
use crate::{Result, Table};

/// State handed to an update.
pub struct StepContext<'a> {
    pub env: &'a ContextualBandit,
    pub current: &'a SoftmaxPolicy,
    pub reference: &'a SoftmaxPolicy,
    /// Zero-based index `t` of the update producing `π_{t+1}`.
    pub iteration: usize,
}

pub struct UpdateOutcome {
    pub next: SoftmaxPolicy,
    /// Objective value reported by the algorithm, if it has one.
    pub loss: Option<f64>,
    /// Base distribution `μ_t` the update sampled its comparison actions from.
    pub base: Table,
    /// Reward table the update targeted (shaped or iteration-dependent).
    pub rewards: Table,
}

pub trait PolicyUpdate {
    fn name(&self) -> &'static str;
    fn update(&mut self, ctx: &StepContext<'_>, rng: &mut SeededRng) -> Result<UpdateOutcome>;
}

pub(crate) fn finite_or_string<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn opt_finite_or_string<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => finite_or_string(v, s),
        None => s.serialize_none(),
    }
}

/// One metrics line. Field order is the wire order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub algo: String,
    pub iteration: usize,
    #[serde(serialize_with = "finite_or_string")]
    pub expected_reward: f64,
    #[serde(serialize_with = "finite_or_string")]
    pub kl_step: f64,
    #[serde(serialize_with = "finite_or_string")]
    pub kl_ref: f64,
    #[serde(serialize_with = "opt_finite_or_string")]
    pub loss: Option<f64>,
    #[serde(serialize_with = "finite_or_string")]
    pub suboptimality: f64,
    #[serde(skip_serializing_if = "Option::is_none", serialize_with = "opt_finite_or_string")]
    pub duality_gap: Option<f64>,
}

impl RunRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub expected_reward: f64,
    pub kl_ref: f64,
    pub suboptimality: f64,
}

pub fn evaluate(env: &ContextualBandit, policy: &SoftmaxPolicy, reference: &SoftmaxPolicy) -> PolicyEval {
    let expected_reward = env.rewards().expect(env.rho(), &policy.prob_table());
    PolicyEval {
        expected_reward,
        kl_ref: mean_kl(env.rho(), policy, reference),
        suboptimality: env.optimal_value() - expected_reward,
    }
}

/// What an update consumed at iteration `t`: `π_t`, `μ_t`, `r_t`.
#[derive(Debug, Clone)]
pub struct IterationTrace {
    pub policy: SoftmaxPolicy,
    pub base: Table,
    pub rewards: Table,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub algo: String,
    pub records: Vec<RunRecord>,
    pub traces: Vec<IterationTrace>,
    pub final_policy: SoftmaxPolicy,
    pub initial_eval: PolicyEval,
}

impl RunOutput {
    /// `π_0, ..., π_T`.
    pub fn iterates(&self) -> impl Iterator<Item = &SoftmaxPolicy> {
        self.traces
            .iter()
            .map(|t| &t.policy)
            .chain(std::iter::once(&self.final_policy))
    }

    pub fn metrics_stream(&self) -> String {
        self.records.iter().map(|r| r.to_json_line() + "\n").collect()
    }
}

pub struct Runner<'a, U> {
    env: &'a ContextualBandit,
    updater: U,
    reference: SoftmaxPolicy,
    current: SoftmaxPolicy,
    traces: Vec<IterationTrace>,
    records: Vec<RunRecord>,
    mixture_sum: Option<Table>,
}

impl<'a, U: PolicyUpdate> Runner<'a, U> {
    /// `initial` is both `π_0` and the KL reference.
    pub fn new(env: &'a ContextualBandit, updater: U, initial: SoftmaxPolicy) -> Self {
        Self {
            env,
            updater,
            reference: initial.clone(),
            current: initial,
            traces: Vec::new(),
            records: Vec::new(),
            mixture_sum: None,
        }
    }

    pub fn current(&self) -> &SoftmaxPolicy {
        &self.current
    }

    pub fn step(&mut self, rng: &mut SeededRng) -> Result<&RunRecord> {
        let t = self.traces.len();
        let ctx = StepContext {
            env: self.env,
            current: &self.current,
            reference: &self.reference,
            iteration: t,
        };
        let outcome = self.updater.update(&ctx, rng).map_err(|e| e.at_iteration(t + 1))?;

        let eval = evaluate(self.env, &outcome.next, &self.reference);
        let kl_step = mean_kl(self.env.rho(), &outcome.next, &self.current);

        let duality_gap = self.env.preferences().map(|prefs| {
            let probs = outcome.next.prob_table();
            let sum = match self.mixture_sum.take() {
                Some(mut acc) => {
                    for x in 0..acc.contexts() {
                        for (a, p) in acc.row_mut(x).iter_mut().zip(probs.row(x)) {
                            *a += p;
                        }
                    }
                    acc
                }
                None => probs,
            };
            let mixture = sum.map(|v| v / (t + 1) as f64);
            self.mixture_sum = Some(sum);
            duality_gap(prefs, self.env.rho(), &mixture).gap
        });

        self.records.push(RunRecord {
            algo: self.updater.name().to_string(),
            iteration: t + 1,
            expected_reward: eval.expected_reward,
            kl_step,
            kl_ref: eval.kl_ref,
            loss: outcome.loss,
            suboptimality: eval.suboptimality,
            duality_gap,
        });
        let previous = std::mem::replace(&mut self.current, outcome.next);
        self.traces.push(IterationTrace {
            policy: previous,
            base: outcome.base,
            rewards: outcome.rewards,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn finish(self) -> RunOutput {
        RunOutput {
            algo: self.updater.name().to_string(),
            initial_eval: evaluate(self.env, &self.reference, &self.reference),
            records: self.records,
            traces: self.traces,
            final_policy: self.current,
        }
    }

    /// Runs `iterations` updates, stopping at the first error.
    pub fn run(mut self, iterations: usize, rng: &mut SeededRng) -> Result<RunOutput> {
        for _ in 0..iterations {
            self.step(rng)?;
        }
        Ok(self.finish())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinite_values_are_tagged() {
        let r = RunRecord {
            algo: "x".into(),
            iteration: 1,
            expected_reward: 0.5,
            kl_step: f64::INFINITY,
            kl_ref: 0.0,
            loss: None,
            suboptimality: 0.0,
            duality_gap: None,
        };
        assert_eq!(
            r.to_json_line(),
            r#"{"algo":"x","iteration":1,"expected_reward":0.5,"kl_step":"inf","kl_ref":0.0,"loss":null,"suboptimality":0.0}"#
        );
    }
}
