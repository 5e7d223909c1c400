//! Dense `(context, action)` tables.

use serde::{Deserialize, Serialize};

/// A dense real-valued table indexed by `(context, action)`, row-major.
///
/// Used for reward tables, policy probability tables, base distributions and
/// advantages. Probability tables have rows summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    contexts: usize,
    actions: usize,
    values: Vec<f64>,
}

impl Table {
    pub fn zeros(contexts: usize, actions: usize) -> Self {
        Self {
            contexts,
            actions,
            values: vec![0.0; contexts * actions],
        }
    }

    /// Panics if `values.len() != contexts * actions`.
    pub fn from_vec(contexts: usize, actions: usize, values: Vec<f64>) -> Self {
        assert_eq!(
            values.len(),
            contexts * actions,
            "table of {contexts}x{actions} needs {} values",
            contexts * actions
        );
        Self {
            contexts,
            actions,
            values,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let contexts = rows.len();
        let actions = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == actions), "ragged table rows");
        Self {
            contexts,
            actions,
            values: rows.concat(),
        }
    }

    /// Uniform distribution over actions in every context.
    pub fn uniform(contexts: usize, actions: usize) -> Self {
        Self::from_vec(contexts, actions, vec![1.0 / actions as f64; contexts * actions])
    }

    /// Deterministic policy playing `choice[x]` in context `x`.
    pub fn deterministic(actions: usize, choice: &[usize]) -> Self {
        let mut t = Self::zeros(choice.len(), actions);
        for (x, &y) in choice.iter().enumerate() {
            t.set(x, y, 1.0);
        }
        t
    }

    pub fn contexts(&self) -> usize {
        self.contexts
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[x * self.actions + y]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[x * self.actions + y] = v;
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.values[x * self.actions..(x + 1) * self.actions]
    }

    pub fn row_mut(&mut self, x: usize) -> &mut [f64] {
        &mut self.values[x * self.actions..(x + 1) * self.actions]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.actions.max(1)).take(self.contexts)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            contexts: self.contexts,
            actions: self.actions,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Convex combination `(1 - w) * self + w * other`.
    pub fn mix(&self, other: &Table, w: f64) -> Self {
        assert_eq!(self.shape(), other.shape());
        Self {
            contexts: self.contexts,
            actions: self.actions,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| (1.0 - w) * a + w * b)
                .collect(),
        }
    }

    /// Uniform average of equally-shaped tables.
    pub fn average<'a>(tables: impl IntoIterator<Item = &'a Table>) -> Option<Self> {
        let mut iter = tables.into_iter();
        let first = iter.next()?;
        let mut acc = first.clone();
        let mut n = 1usize;
        for t in iter {
            assert_eq!(acc.shape(), t.shape());
            for (a, b) in acc.values.iter_mut().zip(&t.values) {
                *a += b;
            }
            n += 1;
        }
        let inv = 1.0 / n as f64;
        acc.values.iter_mut().for_each(|v| *v *= inv);
        Some(acc)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.contexts, self.actions)
    }

    /// `Σ_x w[x] Σ_y p(y|x) self(x, y)`.
    pub fn expect(&self, weights: &[f64], probs: &Table) -> f64 {
        assert_eq!(self.shape(), probs.shape());
        weights
            .iter()
            .enumerate()
            .map(|(x, w)| w * self.row(x).iter().zip(probs.row(x)).map(|(v, p)| v * p).sum::<f64>())
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_and_mix() {
        let a = Table::from_rows(&[vec![1.0, 0.0]]);
        let b = Table::from_rows(&[vec![0.0, 1.0]]);
        assert_eq!(a.mix(&b, 0.5).row(0), &[0.5, 0.5]);
        assert_eq!(Table::average([&a, &b, &b]).unwrap().row(0), &[1.0 / 3.0, 2.0 / 3.0]);
    }

    #[test]
    fn expectation_under_weights() {
        let r = Table::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let p = Table::uniform(2, 2);
        assert!((r.expect(&[0.25, 0.75], &p) - (0.125 + 0.75)).abs() < 1e-15);
    }
}
