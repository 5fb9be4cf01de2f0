use serde::{Deserialize, Serialize};

/// A real-valued table over state-action pairs, stored row-major by state.
///
/// Used for action values, energies and learned network outputs alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaTable {
    n_states: usize,
    n_actions: usize,
    data: Vec<f64>,
}

impl SaTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, data: vec![0.0; n_states * n_actions] }
    }

    pub fn filled(n_states: usize, n_actions: usize, value: f64) -> Self {
        Self { n_states, n_actions, data: vec![value; n_states * n_actions] }
    }

    /// Wraps a flat row-major buffer. Panics if the length is not `n_states * n_actions`.
    pub fn from_flat(n_states: usize, n_actions: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n_states * n_actions, "table buffer has wrong length");
        Self { n_states, n_actions, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == n_actions), "ragged table rows");
        Self { n_states, n_actions, data: rows.concat() }
    }

    pub fn from_fn(n_states: usize, n_actions: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            for a in 0..n_actions {
                data.push(f(s, a));
            }
        }
        Self { n_states, n_actions, data }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.data[s * self.n_actions + a]
    }

    #[inline]
    pub fn set(&mut self, s: usize, a: usize, value: f64) {
        self.data[s * self.n_actions + a] = value;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n_actions.max(1)).map(<[f64]>::to_vec).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { n_states: self.n_states, n_actions: self.n_actions, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// `self * a + other * b`, elementwise.
    pub fn axpby(&self, a: f64, other: &SaTable, b: f64) -> Self {
        assert_eq!(self.data.len(), other.data.len(), "table shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Self { n_states: self.n_states, n_actions: self.n_actions, data }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
