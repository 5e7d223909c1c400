//! Finite contextual bandits and preference models.
//!
//! Contexts and actions are dense integer ids. Every environment is immutable
//! after construction.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::sample_categorical;
use crate::{Error, Result, Table};

/// Context distribution `ρ`, `|Y|` actions per context and a reward table.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualBandit {
    rho: Vec<f64>,
    rewards: Table,
    preferences: Option<PreferenceModel>,
}

impl ContextualBandit {
    pub fn new(rho: Vec<f64>, rewards: Table) -> Result<Self> {
        if rho.is_empty() {
            return Err(Error::InvalidEnv("at least one context is required".into()));
        }
        if rewards.contexts() != rho.len() {
            return Err(Error::InvalidEnv(format!(
                "{} contexts in rho but {} reward rows",
                rho.len(),
                rewards.contexts()
            )));
        }
        if rewards.actions() < 2 {
            return Err(Error::InvalidEnv("at least two actions are required".into()));
        }
        if rho.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidEnv("rho entries must be finite and >= 0".into()));
        }
        let total: f64 = rho.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidEnv(format!("rho sums to {total}, not 1")));
        }
        if rewards.values().iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidEnv("rewards must be finite".into()));
        }
        Ok(Self {
            rho,
            rewards,
            preferences: None,
        })
    }

    /// One context, three actions, `r = (1, 0.5, 0)`.
    pub fn canonical() -> Self {
        Self::new(vec![1.0], Table::from_rows(&[vec![1.0, 0.5, 0.0]])).expect("valid canonical env")
    }

    /// A preference game: rewards are all zero and the payoff drives learning.
    pub fn from_preferences(rho: Vec<f64>, preferences: PreferenceModel) -> Result<Self> {
        let rewards = Table::zeros(preferences.contexts(), preferences.actions());
        Self::new(rho, rewards)?.with_preferences(preferences)
    }

    pub fn with_preferences(mut self, preferences: PreferenceModel) -> Result<Self> {
        if preferences.contexts() != self.contexts() || preferences.actions() != self.actions() {
            return Err(Error::InvalidEnv(format!(
                "preference table is {}x{} but environment is {}x{}",
                preferences.contexts(),
                preferences.actions(),
                self.contexts(),
                self.actions()
            )));
        }
        self.preferences = Some(preferences);
        Ok(self)
    }

    /// Random instance with up to `max_contexts` contexts and between 2 and
    /// `max_actions` actions, rewards uniform in `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_contexts: usize, max_actions: usize) -> Self {
        let contexts = rng.random_range(1..=max_contexts.max(1));
        let actions = rng.random_range(2..=max_actions.max(2));
        let raw: Vec<f64> = (0..contexts).map(|_| rng.random_range(0.1..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let rho = raw.iter().map(|v| v / sum).collect();
        let rewards = (0..contexts * actions).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self::new(rho, Table::from_vec(contexts, actions, rewards)).expect("valid random env")
    }

    pub fn contexts(&self) -> usize {
        self.rho.len()
    }

    pub fn actions(&self) -> usize {
        self.rewards.actions()
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn rewards(&self) -> &Table {
        &self.rewards
    }

    pub fn reward(&self, x: usize, y: usize) -> f64 {
        self.rewards.get(x, y)
    }

    pub fn preferences(&self) -> Option<&PreferenceModel> {
        self.preferences.as_ref()
    }

    pub fn sample_context<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.rho, rng)
    }

    /// `E_x max_y r(x, y)`: the value of the best deterministic policy.
    pub fn optimal_value(&self) -> f64 {
        self.rho
            .iter()
            .zip(self.rewards.rows())
            .map(|(w, row)| w * row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .sum()
    }

    /// Greedy deterministic policy (lowest id among ties).
    pub fn optimal_policy(&self) -> Table {
        let choice: Vec<usize> = self
            .rewards
            .rows()
            .map(|row| {
                let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.iter().position(|&r| r == best).unwrap_or(0)
            })
            .collect();
        Table::deterministic(self.actions(), &choice)
    }

    /// `max_{x,y} |r(x,y)|`.
    pub fn reward_bound(&self) -> f64 {
        self.rewards.max_abs()
    }

    /// `max_x (max_y r − min_y r)`: bounds `|r − E_π r|` for any policy.
    pub fn reward_spread(&self) -> f64 {
        self.rewards
            .rows()
            .map(|row| {
                let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
                hi - lo
            })
            .fold(0.0, f64::max)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: EnvFile = toml::from_str(text)?;
        file.try_into()
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(&EnvFile::from(self))?)
    }
}

/// On-disk environment schema.
///
/// ```toml
/// contexts = 1
/// actions = 3
/// rho = [1.0]
/// rewards = [1.0, 0.5, 0.0]          # contexts × actions, row-major
/// preferences = [0.0, 1.0, ...]      # optional, contexts × actions × actions
/// ```
///
/// `rewards` may be omitted when `preferences` is present (all-zero rewards).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvFile {
    pub contexts: usize,
    pub actions: usize,
    pub rho: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preferences: Option<Vec<f64>>,
}

impl From<&ContextualBandit> for EnvFile {
    fn from(env: &ContextualBandit) -> Self {
        EnvFile {
            contexts: env.contexts(),
            actions: env.actions(),
            rho: env.rho.clone(),
            rewards: Some(env.rewards.values().to_vec()),
            preferences: env.preferences.as_ref().map(|p| p.payoff.clone()),
        }
    }
}

impl TryFrom<EnvFile> for ContextualBandit {
    type Error = Error;

    fn try_from(file: EnvFile) -> Result<Self> {
        if file.rho.len() != file.contexts {
            return Err(Error::InvalidEnv(format!(
                "contexts = {} but rho has {} entries",
                file.contexts,
                file.rho.len()
            )));
        }
        let cells = file.contexts * file.actions;
        let rewards = match file.rewards {
            Some(r) if r.len() != cells => {
                return Err(Error::InvalidEnv(format!(
                    "rewards needs {cells} entries, found {}",
                    r.len()
                )))
            }
            Some(r) => r,
            None if file.preferences.is_some() => vec![0.0; cells],
            None => return Err(Error::InvalidEnv("missing rewards".into())),
        };
        let env = ContextualBandit::new(file.rho, Table::from_vec(file.contexts, file.actions, rewards))?;
        match file.preferences {
            Some(p) => {
                let model = PreferenceModel::from_payoff(file.contexts, file.actions, p)?;
                env.with_preferences(model)
            }
            None => Ok(env),
        }
    }
}

/// Skew-symmetric payoff `l(x, y, y') = 2 P(y ≻ y' | x) − 1 ∈ [−1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceModel {
    contexts: usize,
    actions: usize,
    payoff: Vec<f64>,
}

impl PreferenceModel {
    /// Validates exact skew-symmetry and the `[−1, 1]` range.
    pub fn from_payoff(contexts: usize, actions: usize, payoff: Vec<f64>) -> Result<Self> {
        if payoff.len() != contexts * actions * actions {
            return Err(Error::Dimension {
                what: "preference payoff",
                expected: contexts * actions * actions,
                found: payoff.len(),
            });
        }
        let model = Self {
            contexts,
            actions,
            payoff,
        };
        for x in 0..contexts {
            for y in 0..actions {
                for y2 in 0..actions {
                    let l = model.payoff(x, y, y2);
                    if !(-1.0..=1.0).contains(&l) || l + model.payoff(x, y2, y) != 0.0 {
                        return Err(Error::NotSkewSymmetric { x, y, y2 });
                    }
                }
            }
        }
        Ok(model)
    }

    /// Builds `l = 2P − 1` from win probabilities. `P(y ≻ y') + P(y' ≻ y)`
    /// must equal one within 1e-12; the stored payoff is exactly skew.
    pub fn from_win_probabilities(contexts: usize, actions: usize, probs: &[f64]) -> Result<Self> {
        if probs.len() != contexts * actions * actions {
            return Err(Error::Dimension {
                what: "win probabilities",
                expected: contexts * actions * actions,
                found: probs.len(),
            });
        }
        let idx = |x: usize, y: usize, y2: usize| (x * actions + y) * actions + y2;
        let mut payoff = vec![0.0; probs.len()];
        for x in 0..contexts {
            for y in 0..actions {
                for y2 in (y + 1)..actions {
                    let p = probs[idx(x, y, y2)];
                    let q = probs[idx(x, y2, y)];
                    if !(0.0..=1.0).contains(&p) || (p + q - 1.0).abs() > 1e-12 {
                        return Err(Error::NotSkewSymmetric { x, y, y2 });
                    }
                    let l = 2.0 * p - 1.0;
                    payoff[idx(x, y, y2)] = l;
                    payoff[idx(x, y2, y)] = -l;
                }
            }
        }
        Self::from_payoff(contexts, actions, payoff)
    }

    /// Single-context rock-paper-scissors over (rock, paper, scissors).
    pub fn rock_paper_scissors() -> Self {
        #[rustfmt::skip]
        let payoff = vec![
             0.0, -1.0,  1.0,
             1.0,  0.0, -1.0,
            -1.0,  1.0,  0.0,
        ];
        Self::from_payoff(1, 3, payoff).expect("rps is skew-symmetric")
    }

    /// Uniform random skew-symmetric game: upper triangle drawn from `[−1, 1]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, contexts: usize, actions: usize) -> Self {
        let mut payoff = vec![0.0; contexts * actions * actions];
        for x in 0..contexts {
            for y in 0..actions {
                for y2 in (y + 1)..actions {
                    let l: f64 = rng.random_range(-1.0..=1.0);
                    payoff[(x * actions + y) * actions + y2] = l;
                    payoff[(x * actions + y2) * actions + y] = -l;
                }
            }
        }
        Self::from_payoff(contexts, actions, payoff).expect("constructed skew-symmetric")
    }

    /// Payoff induced by a utility: `l(x, y, y') = clamp(u(x,y) − u(x,y'), −1, 1)`.
    pub fn from_utility(utility: &Table) -> Result<Self> {
        let (contexts, actions) = utility.shape();
        let mut payoff = vec![0.0; contexts * actions * actions];
        for x in 0..contexts {
            for y in 0..actions {
                for y2 in 0..actions {
                    payoff[(x * actions + y) * actions + y2] = if y2 > y {
                        (utility.get(x, y) - utility.get(x, y2)).clamp(-1.0, 1.0)
                    } else if y2 < y {
                        -(utility.get(x, y2) - utility.get(x, y)).clamp(-1.0, 1.0)
                    } else {
                        0.0
                    };
                }
            }
        }
        Self::from_payoff(contexts, actions, payoff)
    }

    pub fn contexts(&self) -> usize {
        self.contexts
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn payoff(&self, x: usize, y: usize, y2: usize) -> f64 {
        self.payoff[(x * self.actions + y) * self.actions + y2]
    }

    pub fn win_probability(&self, x: usize, y: usize, y2: usize) -> f64 {
        (self.payoff(x, y, y2) + 1.0) / 2.0
    }

    /// Bernoulli draw with mean `P(y ≻ y' | x)`; 1 means `y` wins.
    pub fn sample_binary<R: Rng + ?Sized>(&self, x: usize, y: usize, y2: usize, rng: &mut R) -> u8 {
        let p = self.win_probability(x, y, y2);
        let u: f64 = rng.random();
        u8::from(u < p)
    }
}

/// KL-penalized reward `RM(x,y) − γ (ln π_t(y|x) − ln π₀(y|x))`.
#[derive(Debug, Clone, Copy)]
pub struct ShapedReward<'a> {
    pub base: &'a Table,
    pub gamma: f64,
    pub reference: &'a Table,
    pub current: &'a Table,
}

impl ShapedReward<'_> {
    pub fn reward(&self, x: usize, y: usize) -> Result<f64> {
        let base = self.base.get(x, y);
        if self.gamma == 0.0 {
            return Ok(base);
        }
        let cur = self.current.get(x, y);
        let reference = self.reference.get(x, y);
        if cur <= 0.0 || reference <= 0.0 {
            return Err(Error::ZeroProbability { index: 0, x, y });
        }
        Ok(base - self.gamma * (cur.ln() - reference.ln()))
    }

    pub fn table(&self) -> Result<Table> {
        let (contexts, actions) = self.base.shape();
        let mut out = Table::zeros(contexts, actions);
        for x in 0..contexts {
            for y in 0..actions {
                out.set(x, y, self.reward(x, y)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use proptest::prelude::*;

    #[test]
    fn rejects_invalid_envs() {
        let r = Table::from_rows(&[vec![0.0, 1.0]]);
        assert!(ContextualBandit::new(vec![0.5], r.clone()).is_err());
        assert!(ContextualBandit::new(vec![1.0], Table::from_rows(&[vec![1.0]])).is_err());
        assert!(ContextualBandit::new(vec![1.0], Table::from_rows(&[vec![f64::NAN, 1.0]])).is_err());
        assert!(ContextualBandit::new(vec![1.5, -0.5], Table::zeros(2, 2)).is_err());
        assert!(ContextualBandit::new(vec![1.0], r).is_ok());
    }

    #[test]
    fn single_context_always_sampled() {
        let env = ContextualBandit::canonical();
        let mut rng = seeded_rng(3);
        assert!((0..100).all(|_| env.sample_context(&mut rng) == 0));
    }

    #[test]
    fn context_frequencies_follow_rho() {
        let env = ContextualBandit::new(vec![0.5, 0.5], Table::zeros(2, 2)).unwrap();
        let mut rng = seeded_rng(11);
        let n = 100_000;
        let ones = (0..n).filter(|_| env.sample_context(&mut rng) == 1).count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn context_sampling_is_deterministic() {
        let env = ContextualBandit::new(vec![0.2, 0.3, 0.5], Table::zeros(3, 2)).unwrap();
        let draw = |seed| {
            let mut rng = seeded_rng(seed);
            (0..50).map(|_| env.sample_context(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn shaped_reward_examples() {
        let base = Table::from_rows(&[vec![1.0, 0.0]]);
        let cur = Table::from_rows(&[vec![0.5, 0.5]]);
        let reference = Table::from_rows(&[vec![0.25, 0.75]]);
        let unshaped = ShapedReward {
            base: &base,
            gamma: 0.0,
            reference: &reference,
            current: &cur,
        };
        assert_eq!(unshaped.reward(0, 0).unwrap(), 1.0);

        let same = ShapedReward {
            base: &base,
            gamma: 0.7,
            reference: &cur,
            current: &cur,
        };
        assert_eq!(same.table().unwrap(), base);

        let shaped = ShapedReward {
            base: &base,
            gamma: 0.05,
            reference: &reference,
            current: &cur,
        };
        let expected = 1.0 - 0.05 * 2f64.ln();
        assert!((shaped.reward(0, 0).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.96534).abs() < 1e-5);

        let zero = Table::from_rows(&[vec![0.0, 1.0]]);
        let bad = ShapedReward {
            base: &base,
            gamma: 0.1,
            reference: &reference,
            current: &zero,
        };
        assert!(matches!(bad.reward(0, 0), Err(Error::ZeroProbability { .. })));
    }

    #[test]
    fn payoff_examples() {
        let rps = PreferenceModel::rock_paper_scissors();
        assert_eq!(rps.payoff(0, 1, 1), 0.0);
        assert_eq!(rps.payoff(0, 0, 2), 1.0);
        assert_eq!(rps.payoff(0, 2, 0), -1.0);

        let p = PreferenceModel::from_win_probabilities(1, 2, &[0.5, 0.75, 0.25, 0.5]).unwrap();
        assert_eq!(p.payoff(0, 0, 1), 0.5);
        assert_eq!(p.payoff(0, 1, 0), -0.5);
    }

    #[test]
    fn rejects_non_skew_payoff() {
        assert!(PreferenceModel::from_payoff(1, 2, vec![0.0, 0.5, -0.4, 0.0]).is_err());
        assert!(PreferenceModel::from_payoff(1, 2, vec![0.1, 0.5, -0.5, 0.0]).is_err());
        assert!(PreferenceModel::from_payoff(1, 2, vec![0.0, 1.5, -1.5, 0.0]).is_err());
        assert!(PreferenceModel::from_win_probabilities(1, 2, &[0.5, 0.7, 0.2, 0.5]).is_err());
    }

    #[test]
    fn binary_preference_draws() {
        let p = PreferenceModel::from_payoff(1, 3, vec![0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut rng = seeded_rng(9);
        assert!((0..1000).all(|_| p.sample_binary(0, 0, 1, &mut rng) == 1));
        assert!((0..1000).all(|_| p.sample_binary(0, 1, 0, &mut rng) == 0));
        let n = 100_000;
        let wins: u32 = (0..n).map(|_| p.sample_binary(0, 0, 2, &mut rng) as u32).sum();
        assert!((wins as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn file_roundtrip_with_preferences() {
        let env = ContextualBandit::from_preferences(vec![1.0], PreferenceModel::rock_paper_scissors()).unwrap();
        let text = env.to_toml_string().unwrap();
        assert_eq!(ContextualBandit::from_toml_str(&text).unwrap(), env);
    }

    #[test]
    fn file_rejects_missing_rewards() {
        let text = "contexts = 1\nactions = 2\nrho = [1.0]\n";
        assert!(ContextualBandit::from_toml_str(text).is_err());
    }

    proptest! {
        #[test]
        fn file_roundtrip_is_bit_exact(seed in 0u64..10_000) {
            let mut rng = seeded_rng(seed);
            let env = ContextualBandit::random(&mut rng, 4, 6);
            let text = env.to_toml_string().unwrap();
            let back = ContextualBandit::from_toml_str(&text).unwrap();
            prop_assert_eq!(
                back.rewards().values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                env.rewards().values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            prop_assert_eq!(back.rho(), env.rho());
            prop_assert_eq!(back.to_toml_string().unwrap(), text);
        }

        #[test]
        fn random_games_are_skew(seed in 0u64..10_000) {
            let mut rng = seeded_rng(seed);
            let g = PreferenceModel::random(&mut rng, 2, 4);
            for x in 0..2 { for y in 0..4 { for y2 in 0..4 {
                prop_assert_eq!(g.payoff(x, y, y2) + g.payoff(x, y2, y), 0.0);
            }}}
        }
    }
}
