//! The width-`m` two-layer ReLU network
//! `u_α(x) = m^{-1/2} Σ_i b_i · ReLU(α_iᵀx)` with frozen output signs.
//!
//! Weights are stored as one flat `m·d` vector, neuron-major. The projection
//! ball is over the concatenated weights and centered at the initialization.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::dot;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("input has dimension {got}, network expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("width and input dimension must be at least 1")]
    EmptyShape,
    #[error("radius must be positive, got {0}")]
    Radius(f64),
    #[error("linearization gap needs at least one sample")]
    EmptySample,
    #[error("snapshot does not match the initialization: {0}")]
    Snapshot(String),
}

/// Frozen initialization shared by every network built from it.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInit {
    m: usize,
    d: usize,
    /// `b_i ∈ {-1, +1}` stored as floats.
    signs: Vec<f64>,
    alpha0: Vec<f64>,
    seed: Option<u64>,
}

impl NetInit {
    /// `b_i ∼ Unif{±1}`, `α_i(0) ∼ N(0, I_d/d)`.
    pub fn sample<R: Rng + ?Sized>(m: usize, d: usize, rng: &mut R) -> Result<Self, NetError> {
        if m == 0 || d == 0 {
            return Err(NetError::EmptyShape);
        }
        let scale = 1.0 / (d as f64).sqrt();
        let signs = (0..m).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let alpha0 = (0..m * d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        Ok(Self { m, d, signs, alpha0, seed: None })
    }

    /// Deterministic initialization from a seed (stream 0 of [`crate::seeded_rng`]).
    pub fn from_seed(m: usize, d: usize, seed: u64) -> Result<Self, NetError> {
        let mut init = Self::sample(m, d, &mut crate::seeded_rng(seed, 0))?;
        init.seed = Some(seed);
        Ok(init)
    }

    /// Builds an initialization from explicit parts.
    pub fn from_parts(d: usize, signs: Vec<f64>, alpha0: Vec<f64>) -> Result<Self, NetError> {
        let m = signs.len();
        if m == 0 || d == 0 {
            return Err(NetError::EmptyShape);
        }
        if alpha0.len() != m * d {
            return Err(NetError::Dimension { expected: m * d, got: alpha0.len() });
        }
        Ok(Self { m, d, signs, alpha0, seed: None })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    pub fn alpha0(&self) -> &[f64] {
        &self.alpha0
    }

    #[inline]
    pub(crate) fn neuron0(&self, i: usize) -> &[f64] {
        &self.alpha0[i * self.d..(i + 1) * self.d]
    }

    /// Preactivations `α_i(0)ᵀx` for every neuron.
    pub fn preactivations0(&self, x: &[f64]) -> Vec<f64> {
        (0..self.m).map(|i| dot(self.neuron0(i), x)).collect()
    }
}

/// A network whose weights live in the ball of radius `radius` around its init.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet {
    init: Arc<NetInit>,
    alpha: Vec<f64>,
    radius: f64,
}

impl TwoLayerNet {
    /// A network sitting at its initialization.
    pub fn new(init: Arc<NetInit>, radius: f64) -> Result<Self, NetError> {
        if !(radius > 0.0) {
            return Err(NetError::Radius(radius));
        }
        let alpha = init.alpha0.clone();
        Ok(Self { init, alpha, radius })
    }

    /// Fresh network with its own random initialization.
    pub fn init<R: Rng + ?Sized>(m: usize, d: usize, radius: f64, rng: &mut R) -> Result<Self, NetError> {
        Self::new(Arc::new(NetInit::sample(m, d, rng)?), radius)
    }

    /// Network with weights `α(0) + delta`, projected into the ball.
    pub fn with_delta(init: Arc<NetInit>, radius: f64, delta: &[f64]) -> Result<Self, NetError> {
        let mut net = Self::new(init, radius)?;
        if delta.len() != net.alpha.len() {
            return Err(NetError::Dimension { expected: net.alpha.len(), got: delta.len() });
        }
        net.alpha.iter_mut().zip(delta).for_each(|(a, d)| *a += d);
        net.project();
        Ok(net)
    }

    pub fn m(&self) -> usize {
        self.init.m
    }

    pub fn d(&self) -> usize {
        self.init.d
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn init_ref(&self) -> &Arc<NetInit> {
        &self.init
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha0(&self) -> &[f64] {
        &self.init.alpha0
    }

    pub fn signs(&self) -> &[f64] {
        &self.init.signs
    }

    /// `α - α(0)`.
    pub fn delta(&self) -> Vec<f64> {
        self.alpha.iter().zip(&self.init.alpha0).map(|(a, b)| a - b).collect()
    }

    /// `‖α - α(0)‖₂`.
    pub fn distance_to_init(&self) -> f64 {
        self.alpha.iter().zip(&self.init.alpha0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    /// Overwrites the weights with `α(0) + delta` without projecting.
    pub(crate) fn set_delta_unchecked(&mut self, delta: &[f64]) {
        for ((a, a0), d) in self.alpha.iter_mut().zip(&self.init.alpha0).zip(delta) {
            *a = a0 + d;
        }
    }

    fn check(&self, x: &[f64]) -> Result<(), NetError> {
        if x.len() != self.init.d {
            return Err(NetError::Dimension { expected: self.init.d, got: x.len() });
        }
        Ok(())
    }

    #[inline]
    fn neuron(&self, i: usize) -> &[f64] {
        &self.alpha[i * self.init.d..(i + 1) * self.init.d]
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64, NetError> {
        self.check(x)?;
        Ok(self.forward_unchecked(x))
    }

    #[inline]
    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> f64 {
        let d = self.init.d;
        let mut sum = 0.0;
        for (w, b) in self.alpha.chunks_exact(d).zip(&self.init.signs) {
            let z = dot(w, x);
            if z > 0.0 {
                sum += b * z;
            }
        }
        sum / (self.init.m as f64).sqrt()
    }

    /// `∇_α u_α(x)`: block `i` is `b_i m^{-1/2} 1{α_iᵀx > 0} x`.
    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        self.check(x)?;
        let d = self.init.d;
        let scale = 1.0 / (self.init.m as f64).sqrt();
        let mut g = vec![0.0; self.alpha.len()];
        for i in 0..self.init.m {
            if dot(self.neuron(i), x) > 0.0 {
                let c = self.init.signs[i] * scale;
                g[i * d..(i + 1) * d].iter_mut().zip(x).for_each(|(gi, xi)| *gi = c * xi);
            }
        }
        Ok(g)
    }

    /// Pulls the weights back onto the ball; returns whether they moved.
    pub fn project(&mut self) -> bool {
        let dist = self.distance_to_init();
        if dist <= self.radius {
            return false;
        }
        let shrink = self.radius / dist;
        for (a, a0) in self.alpha.iter_mut().zip(&self.init.alpha0) {
            *a = a0 + shrink * (*a - a0);
        }
        true
    }

    /// `u⁰_α(x) = m^{-1/2} Σ_i b_i 1{α_i(0)ᵀx > 0} α_iᵀx`.
    pub fn linearized_forward(&self, x: &[f64]) -> Result<f64, NetError> {
        self.check(x)?;
        let mut sum = 0.0;
        for i in 0..self.init.m {
            if dot(self.init.neuron0(i), x) > 0.0 {
                sum += self.init.signs[i] * dot(self.neuron(i), x);
            }
        }
        Ok(sum / (self.init.m as f64).sqrt())
    }

    pub fn snapshot(&self) -> NetSnapshot {
        NetSnapshot { seed: self.init.seed, m: self.m(), d: self.d(), radius: self.radius, alpha: self.alpha.clone() }
    }

    /// Rebuilds a network from `init` and a snapshot taken from a network sharing it.
    pub fn from_snapshot(init: Arc<NetInit>, snap: &NetSnapshot) -> Result<Self, NetError> {
        if snap.m != init.m || snap.d != init.d || snap.seed != init.seed {
            return Err(NetError::Snapshot(format!(
                "snapshot (m={}, d={}, seed={:?}) vs init (m={}, d={}, seed={:?})",
                snap.m, snap.d, snap.seed, init.m, init.d, init.seed
            )));
        }
        let mut net = Self::new(init, snap.radius)?;
        if snap.alpha.len() != net.alpha.len() {
            return Err(NetError::Dimension { expected: net.alpha.len(), got: snap.alpha.len() });
        }
        net.alpha.copy_from_slice(&snap.alpha);
        Ok(net)
    }
}

/// Serializable network state: the seed that fixes `α(0)` and `b`, plus `α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSnapshot {
    pub seed: Option<u64>,
    pub m: usize,
    pub d: usize,
    pub radius: f64,
    pub alpha: Vec<f64>,
}

/// Monte-Carlo estimate of `E[(u_α(x) - u⁰_α(x))²]` over the given networks
/// and `n_samples` draws of `x` from `sample_x`, averaged over networks.
pub fn linearization_gap<R, F>(
    nets: &[TwoLayerNet],
    mut sample_x: F,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64, NetError>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Vec<f64>,
{
    if nets.is_empty() || n_samples == 0 {
        return Err(NetError::EmptySample);
    }
    let mut total = 0.0;
    for net in nets {
        for _ in 0..n_samples {
            let x = sample_x(rng);
            let diff = net.forward(&x)? - net.linearized_forward(&x)?;
            total += diff * diff;
        }
    }
    Ok(total / (nets.len() * n_samples) as f64)
}

/// Uniform draw from the unit sphere of `R^d`.
pub fn sample_unit_sphere<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = crate::mdp::l2(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}
