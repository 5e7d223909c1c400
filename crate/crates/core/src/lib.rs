//! Policy optimization by regressing relative rewards.
//!
//! Each iteration collects triples `(x, y, y')` with `y` drawn from the
//! current policy and `y'` from a base distribution, then fits the scaled
//! log-probability-ratio difference of a candidate policy to the reward
//! difference `r(x, y) - r(x, y')` by least squares. Solved exactly on a
//! tabular softmax policy the update is the mirror-descent step
//! `π_{t+1}(y|x) ∝ π_t(y|x) exp(η r(x, y))`.
//!
//! The crate works at "desk scale": finite contexts and actions, so every
//! expectation can be enumerated exactly. That makes it possible to check
//! the update against exact oracles ([`baselines::md_oracle_step`]), against
//! natural policy gradient ([`regression::gauss_newton_step`] versus
//! [`baselines::npg_step`]), and against the regret bounds in [`theory`].
//!
//! Module map:
//!
//! - [`numerics`]: min-norm least squares, pseudo-inverse, finite differences, RNG.
//! - [`env`]: contextual bandits, preference models, reward shaping, file format.
//! - [`policy`]: softmax policies, KL, advantages, Fisher matrices, best/worst-of-N.
//! - [`regression`]: dataset collection, the regression loss, solvers, run loop.
//! - [`baselines`]: mirror descent, NPG, REINFORCE, RLOO, PPO-clip, iterative DPO.
//! - [`selfplay`]: self-play with general preferences and duality gaps.
//! - [`theory`]: executable checks of the regression and regret bounds.
//! - [`harness`]: experiment configs, metrics streams, train/compare/sweep/verify.

pub mod baselines;
pub mod env;
mod error;
pub mod harness;
pub mod numerics;
pub mod policy;
pub mod regression;
pub mod run;
pub mod selfplay;
pub mod table;
pub mod theory;

pub use error::{Error, Result};
pub use table::Table;
