//! Softmax policies over finite action sets.
//!
//! A tabular policy is the linear-softmax special case with one-hot features,
//! so both share one type and one gradient formula:
//! `∇ ln π(y|x) = φ(x,y) − E_{y'∼π(·|x)} φ(x,y')`.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{sample_categorical, DenseMatrix};
use crate::{Error, Result, Table};

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    /// One parameter per `(x, y)`: `θ[x * |Y| + y]` is the logit.
    Tabular,
    /// `φ(x, y) ∈ R^dim`, stored row-major by `(x, y)`.
    Linear { dim: usize, phi: Arc<[f64]> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    contexts: usize,
    actions: usize,
    features: FeatureMap,
    theta: Vec<f64>,
}

impl SoftmaxPolicy {
    /// Uniform tabular policy.
    pub fn tabular(contexts: usize, actions: usize) -> Self {
        Self {
            contexts,
            actions,
            features: FeatureMap::Tabular,
            theta: vec![0.0; contexts * actions],
        }
    }

    pub fn tabular_from_logits(logits: &Table) -> Self {
        Self {
            contexts: logits.contexts(),
            actions: logits.actions(),
            features: FeatureMap::Tabular,
            theta: logits.values().to_vec(),
        }
    }

    /// Tabular policy reproducing a probability table; zero entries get a
    /// logit far enough below the row maximum to underflow to probability 0.
    pub fn tabular_from_probs(probs: &Table) -> Self {
        Self::tabular_from_logits(&probs.map(|p| if p > 0.0 { p.ln() } else { -1e4 }))
    }

    pub fn linear(contexts: usize, actions: usize, dim: usize, phi: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        if phi.len() != contexts * actions * dim {
            return Err(Error::Dimension {
                what: "feature table",
                expected: contexts * actions * dim,
                found: phi.len(),
            });
        }
        if theta.len() != dim {
            return Err(Error::Dimension {
                what: "linear policy weights",
                expected: dim,
                found: theta.len(),
            });
        }
        if phi.iter().chain(&theta).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear policy".into()));
        }
        Ok(Self {
            contexts,
            actions,
            features: FeatureMap::Linear { dim, phi: phi.into() },
            theta,
        })
    }

    pub fn contexts(&self) -> usize {
        self.contexts
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn is_tabular(&self) -> bool {
        matches!(self.features, FeatureMap::Tabular)
    }

    /// Same parameterization, new parameters.
    pub fn with_theta(&self, theta: Vec<f64>) -> Self {
        assert_eq!(theta.len(), self.theta.len(), "parameter dimension changed");
        Self {
            contexts: self.contexts,
            actions: self.actions,
            features: self.features.clone(),
            theta,
        }
    }

    /// `θ + scale · δ`.
    pub fn step(&self, delta: &[f64], scale: f64) -> Self {
        self.with_theta(self.theta.iter().zip(delta).map(|(t, d)| t + scale * d).collect())
    }

    /// `φ(x, y)`.
    pub fn feature(&self, x: usize, y: usize) -> Vec<f64> {
        match &self.features {
            FeatureMap::Tabular => {
                let mut v = vec![0.0; self.theta.len()];
                v[x * self.actions + y] = 1.0;
                v
            }
            FeatureMap::Linear { dim, phi } => {
                let start = (x * self.actions + y) * dim;
                phi[start..start + dim].to_vec()
            }
        }
    }

    pub fn logits(&self, x: usize) -> Vec<f64> {
        match &self.features {
            FeatureMap::Tabular => self.theta[x * self.actions..(x + 1) * self.actions].to_vec(),
            FeatureMap::Linear { dim, phi } => (0..self.actions)
                .map(|y| {
                    let start = (x * self.actions + y) * dim;
                    phi[start..start + dim]
                        .iter()
                        .zip(&self.theta)
                        .map(|(f, t)| f * t)
                        .sum()
                })
                .collect(),
        }
    }

    /// Log-softmax of the context's logits, max-subtracted.
    pub fn log_probs(&self, x: usize) -> Vec<f64> {
        log_softmax(&self.logits(x))
    }

    pub fn probs(&self, x: usize) -> Vec<f64> {
        self.log_probs(x).into_iter().map(f64::exp).collect()
    }

    pub fn log_prob(&self, x: usize, y: usize) -> f64 {
        self.log_probs(x)[y]
    }

    pub fn prob_table(&self) -> Table {
        let values = (0..self.contexts).flat_map(|x| self.probs(x)).collect();
        Table::from_vec(self.contexts, self.actions, values)
    }

    pub fn log_prob_table(&self) -> Table {
        let values = (0..self.contexts).flat_map(|x| self.log_probs(x)).collect();
        Table::from_vec(self.contexts, self.actions, values)
    }

    /// `∇_θ ln π(y|x) = φ(x,y) − E_{y'∼π(·|x)} φ(x,y')`.
    pub fn grad_log_prob(&self, x: usize, y: usize) -> Vec<f64> {
        let probs = self.probs(x);
        self.grad_log_prob_with(x, y, &probs)
    }

    fn grad_log_prob_with(&self, x: usize, y: usize, probs: &[f64]) -> Vec<f64> {
        match &self.features {
            FeatureMap::Tabular => {
                let mut g = vec![0.0; self.theta.len()];
                let block = &mut g[x * self.actions..(x + 1) * self.actions];
                for (b, p) in block.iter_mut().zip(probs) {
                    *b = -p;
                }
                block[y] += 1.0;
                g
            }
            FeatureMap::Linear { dim, phi } => {
                let row = |a: usize| &phi[(x * self.actions + a) * dim..(x * self.actions + a + 1) * dim];
                let mut g = row(y).to_vec();
                for (a, p) in probs.iter().enumerate() {
                    for (gi, f) in g.iter_mut().zip(row(a)) {
                        *gi -= p * f;
                    }
                }
                g
            }
        }
    }

    /// Score vectors for every action of context `x`.
    pub fn grad_log_probs(&self, x: usize) -> Vec<Vec<f64>> {
        let probs = self.probs(x);
        (0..self.actions)
            .map(|y| self.grad_log_prob_with(x, y, &probs))
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> usize {
        sample_categorical(&self.probs(x), rng)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&Checkpoint::from(self))?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        ckpt.try_into()
    }
}

/// Policy checkpoint: dimensions plus the flat parameter vector (and the
/// feature table for linear policies).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub contexts: usize,
    pub actions: usize,
    pub parameterization: String,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
}

impl From<&SoftmaxPolicy> for Checkpoint {
    fn from(p: &SoftmaxPolicy) -> Self {
        let (parameterization, features) = match &p.features {
            FeatureMap::Tabular => ("tabular", None),
            FeatureMap::Linear { phi, .. } => ("linear", Some(phi.to_vec())),
        };
        Checkpoint {
            contexts: p.contexts,
            actions: p.actions,
            parameterization: parameterization.into(),
            theta: p.theta.clone(),
            features,
        }
    }
}

impl TryFrom<Checkpoint> for SoftmaxPolicy {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        match (c.parameterization.as_str(), c.features) {
            ("tabular", None) => {
                if c.theta.len() != c.contexts * c.actions {
                    return Err(Error::Dimension {
                        what: "tabular checkpoint",
                        expected: c.contexts * c.actions,
                        found: c.theta.len(),
                    });
                }
                Ok(SoftmaxPolicy::tabular_from_logits(&Table::from_vec(
                    c.contexts, c.actions, c.theta,
                )))
            }
            ("linear", Some(phi)) => {
                let dim = c.theta.len();
                SoftmaxPolicy::linear(c.contexts, c.actions, dim, phi, c.theta)
            }
            (other, _) => Err(Error::InvalidConfig(format!(
                "unknown or inconsistent parameterization {other:?}"
            ))),
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// `Σ_y p(y) ln(p(y)/q(y))`; `+∞` when `q(y) = 0 < p(y)`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return f64::INFINITY;
        }
        total += pi * (pi.ln() - qi.ln());
    }
    total.max(0.0)
}

/// KL between two policies' log-probability rows, stable for tiny masses.
pub fn kl_from_log_probs(log_p: &[f64], log_q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&lp, &lq) in log_p.iter().zip(log_q) {
        let p = lp.exp();
        if p == 0.0 {
            continue;
        }
        if lq == f64::NEG_INFINITY {
            return f64::INFINITY;
        }
        total += p * (lp - lq);
    }
    total.max(0.0)
}

/// `KL(p(·|x) ‖ q(·|x))` for two policies.
pub fn policy_kl(p: &SoftmaxPolicy, q: &SoftmaxPolicy, x: usize) -> f64 {
    kl_from_log_probs(&p.log_probs(x), &q.log_probs(x))
}

/// `E_{x∼ρ} KL(p(·|x) ‖ q(·|x))`.
pub fn mean_kl(rho: &[f64], p: &SoftmaxPolicy, q: &SoftmaxPolicy) -> f64 {
    rho.iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(x, w)| w * policy_kl(p, q, x))
        .sum()
}

pub fn max_kl(p: &SoftmaxPolicy, q: &SoftmaxPolicy) -> f64 {
    (0..p.contexts()).map(|x| policy_kl(p, q, x)).fold(0.0, f64::max)
}

/// `A(x, y) = r(x, y) − E_{y'∼π(·|x)} r(x, y')` for one context.
pub fn advantage(rewards: &[f64], probs: &[f64]) -> Vec<f64> {
    let baseline: f64 = rewards.iter().zip(probs).map(|(r, p)| r * p).sum();
    rewards.iter().map(|r| r - baseline).collect()
}

pub fn advantage_table(rewards: &Table, probs: &Table) -> Table {
    let values = (0..rewards.contexts())
        .flat_map(|x| advantage(rewards.row(x), probs.row(x)))
        .collect();
    Table::from_vec(rewards.contexts(), rewards.actions(), values)
}

/// Joint weights `ρ(x) p(y|x)` over `(x, y)`.
pub fn joint_weights(rho: &[f64], probs: &Table) -> Table {
    let mut out = probs.clone();
    for (x, w) in rho.iter().enumerate() {
        out.row_mut(x).iter_mut().for_each(|v| *v *= w);
    }
    out
}

/// `E_{(x,y)∼w}[∇ln π(y|x) ∇ln π(y|x)ᵀ]` by enumeration over a joint weight
/// table (weights summing to one).
pub fn fisher_matrix(policy: &SoftmaxPolicy, weights: &Table) -> DenseMatrix {
    let d = policy.dim();
    let mut f = DenseMatrix::zeros(d, d);
    for x in 0..policy.contexts() {
        let row = weights.row(x);
        if row.iter().all(|w| *w == 0.0) {
            continue;
        }
        for (y, g) in policy.grad_log_probs(x).into_iter().enumerate() {
            if row[y] != 0.0 {
                f.add_outer(row[y], &g, &g);
            }
        }
    }
    f
}

/// `C_{μ→π} = max_{x,y: π>0} π(y|x)/μ(y|x)`; `+∞` when μ misses π's support.
pub fn concentrability(pi: &Table, mu: &Table) -> f64 {
    pi.values()
        .iter()
        .zip(mu.values())
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, m)| if *m > 0.0 { p / m } else { f64::INFINITY })
        .fold(0.0, f64::max)
}

/// Order in which best-of-N prefers actions: higher reward first, lower id
/// among ties.
fn preference_order(rewards: &[f64], best: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rewards.len()).collect();
    order.sort_by(|&a, &b| {
        let cmp = rewards[b].total_cmp(&rewards[a]);
        let cmp = if best { cmp } else { cmp.reverse() };
        cmp.then(a.cmp(&b))
    });
    order
}

fn extreme_of_n<R: Rng + ?Sized>(probs: &[f64], rewards: &[f64], n: usize, best: bool, rng: &mut R) -> usize {
    assert!(n >= 1, "best/worst-of-N needs N >= 1");
    let rank: Vec<usize> = {
        let order = preference_order(rewards, best);
        let mut rank = vec![0; order.len()];
        for (i, a) in order.into_iter().enumerate() {
            rank[a] = i;
        }
        rank
    };
    (0..n)
        .map(|_| sample_categorical(probs, rng))
        .min_by_key(|&a| rank[a])
        .expect("n >= 1")
}

/// Draws `n` actions from `probs` and returns the highest-reward one
/// (lowest id among ties).
pub fn best_of_n<R: Rng + ?Sized>(probs: &[f64], rewards: &[f64], n: usize, rng: &mut R) -> usize {
    extreme_of_n(probs, rewards, n, true, rng)
}

/// Draws `n` actions from `probs` and returns the lowest-reward one
/// (lowest id among ties).
pub fn worst_of_n<R: Rng + ?Sized>(probs: &[f64], rewards: &[f64], n: usize, rng: &mut R) -> usize {
    extreme_of_n(probs, rewards, n, false, rng)
}

/// Exact law of [`best_of_n`] (or [`worst_of_n`] when `best` is false).
///
/// With actions ranked by preference, rank `k` is selected iff all draws land
/// in ranks `≥ k` but not all in ranks `> k`: `T_k^N − T_{k+1}^N`.
pub fn extreme_of_n_distribution(probs: &[f64], rewards: &[f64], n: usize, best: bool) -> Vec<f64> {
    let order = preference_order(rewards, best);
    let mut out = vec![0.0; probs.len()];
    let mut tail: f64 = order.iter().map(|&a| probs[a]).sum();
    for &a in &order {
        let next = (tail - probs[a]).max(0.0);
        out[a] = tail.powi(n as i32) - next.powi(n as i32);
        tail = next;
    }
    out
}
