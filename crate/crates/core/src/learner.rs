//! Projected stochastic (semi)gradient with iterate averaging.
//!
//! One step on tuple `(x, x')` with residual `δ = u_α(x) - v(x) - μ·u_α(x')`:
//!
//! ```text
//! α ← Π_{B(α(0), R)}(α - η·δ·∇_α u_α(x))
//! ```
//!
//! `μ = 0` gives the actor's regression (SGD) and `μ = γ` the critic's
//! semigradient TD. Inputs are state-action pair indices into a
//! [`PairContext`], which caches features and initial preactivations.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{dot, FiniteMdp, PolicyTable, Transition};
use crate::net::{NetInit, TwoLayerNet};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("need {needed} samples, got {got}")]
    SampleShortage { needed: usize, got: usize },
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("stationary point solve failed: {0}")]
    Stationary(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = LearnerError> = std::result::Result<T, E>;

/// Network initialization evaluated on a fixed finite input set.
#[derive(Debug, Clone)]
pub struct PairContext {
    init: Arc<NetInit>,
    n_pairs: usize,
    x: Vec<f64>,
    x_norm2: Vec<f64>,
    /// `α_i(0)ᵀx_p`, pair-major (`n_pairs x m`).
    z0: Vec<f64>,
    /// `u_{α(0)}(x_p)`.
    u0: Vec<f64>,
}

impl PairContext {
    /// `features` is `n_pairs x d` row-major.
    pub fn new(init: Arc<NetInit>, features: &[f64]) -> Result<Self> {
        let d = init.d();
        if features.is_empty() || !features.len().is_multiple_of(d) {
            return Err(LearnerError::Invalid(format!("{} feature values do not split into rows of {d}", features.len())));
        }
        let n_pairs = features.len() / d;
        let m = init.m();
        let x = features.to_vec();
        let x_norm2 = x.chunks_exact(d).map(|r| dot(r, r)).collect();
        let mut z0 = Vec::with_capacity(n_pairs * m);
        let mut u0 = Vec::with_capacity(n_pairs);
        let scale = 1.0 / (m as f64).sqrt();
        for p in 0..n_pairs {
            let zs = init.preactivations0(&x[p * d..(p + 1) * d]);
            u0.push(scale * zs.iter().zip(init.signs()).filter(|(z, _)| **z > 0.0).map(|(z, b)| b * z).sum::<f64>());
            z0.extend(zs);
        }
        Ok(Self { init, n_pairs, x, x_norm2, z0, u0 })
    }

    pub fn for_mdp(init: Arc<NetInit>, mdp: &FiniteMdp) -> Result<Self> {
        if init.d() != mdp.d() {
            return Err(LearnerError::Invalid(format!("network d = {} but features have d = {}", init.d(), mdp.d())));
        }
        Self::new(init, mdp.features_flat())
    }

    pub fn init(&self) -> &Arc<NetInit> {
        &self.init
    }

    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    pub fn feature(&self, p: usize) -> &[f64] {
        let d = self.init.d();
        &self.x[p * d..(p + 1) * d]
    }

    /// `u_{α(0)}` on every pair.
    pub fn u0(&self) -> &[f64] {
        &self.u0
    }

    /// `u_α` on every pair.
    pub fn eval(&self, net: &TwoLayerNet) -> Vec<f64> {
        (0..self.n_pairs).map(|p| net.forward_unchecked(self.feature(p))).collect()
    }

    /// `u_α - u_{α(0)}` on every pair.
    pub fn eval_residual(&self, net: &TwoLayerNet) -> Vec<f64> {
        self.eval(net).iter().zip(&self.u0).map(|(u, u0)| u - u0).collect()
    }

    /// `u⁰_α` on every pair.
    pub fn eval_linearized(&self, alpha: &[f64]) -> Vec<f64> {
        let (m, d) = (self.init.m(), self.init.d());
        let scale = 1.0 / (m as f64).sqrt();
        (0..self.n_pairs)
            .map(|p| {
                let x = self.feature(p);
                let z0 = &self.z0[p * m..(p + 1) * m];
                let mut s = 0.0;
                for i in 0..m {
                    if z0[i] > 0.0 {
                        s += self.init.signs()[i] * dot(&alpha[i * d..(i + 1) * d], x);
                    }
                }
                scale * s
            })
            .collect()
    }

    /// Rows `∇_α u⁰(x_p)` stacked into an `n_pairs x (m·d)` matrix.
    pub fn linearized_jacobian(&self) -> DMatrix<f64> {
        let (m, d) = (self.init.m(), self.init.d());
        let scale = 1.0 / (m as f64).sqrt();
        let mut phi = DMatrix::zeros(self.n_pairs, m * d);
        for p in 0..self.n_pairs {
            let x = self.feature(p);
            for i in 0..m {
                if self.z0[p * m + i] > 0.0 {
                    let c = scale * self.init.signs()[i];
                    for j in 0..d {
                        phi[(p, i * d + j)] = c * x[j];
                    }
                }
            }
        }
        phi
    }
}

/// One learner input: the pair the gradient is taken at and the bootstrap pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairTuple {
    pub pair: usize,
    pub next: usize,
}

/// Population law of [`PairTuple`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleDistribution {
    /// Weight of each pair.
    pub weights: Vec<f64>,
    /// Row-stochastic next-pair kernel (`n_pairs x n_pairs`), absent for `μ = 0`.
    pub kernel: Option<Vec<f64>>,
}

impl TupleDistribution {
    pub fn pairs_only(weights: Vec<f64>) -> Self {
        Self { weights, kernel: None }
    }

    /// `(s, a) ∼ weights`, `s' ∼ P(·|s,a)`, `a' ∼ π(·|s')`.
    pub fn on_policy(mdp: &FiniteMdp, pi: &PolicyTable, weights: Vec<f64>) -> Self {
        let n = mdp.n_pairs();
        let na = mdp.n_actions();
        let mut kernel = vec![0.0; n * n];
        for p in 0..n {
            for (sp, prob) in mdp.transition_row(p / na, p % na).iter().enumerate() {
                for ap in 0..na {
                    kernel[p * n + mdp.pair(sp, ap)] += prob * pi.prob(sp, ap);
                }
            }
        }
        Self { weights, kernel: Some(kernel) }
    }

    fn n_pairs(&self) -> usize {
        self.weights.len()
    }

    fn kernel_row(&self, p: usize) -> Option<&[f64]> {
        let n = self.n_pairs();
        self.kernel.as_ref().map(|k| &k[p * n..(p + 1) * n])
    }

    pub fn sampler(&self) -> Result<PairSampler> {
        let bad = |e: rand::distr::weighted::Error| LearnerError::Invalid(format!("cannot sample: {e}"));
        let pair = WeightedIndex::new(self.weights.iter().copied()).map_err(bad)?;
        let next = match &self.kernel {
            Some(_) => (0..self.n_pairs())
                .map(|p| WeightedIndex::new(self.kernel_row(p).unwrap().iter().copied()).map_err(bad))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        Ok(PairSampler { pair, next })
    }
}

#[derive(Debug, Clone)]
pub struct PairSampler {
    pair: WeightedIndex<f64>,
    next: Vec<WeightedIndex<f64>>,
}

impl PairSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PairTuple {
        let pair = self.pair.sample(rng);
        let next = if self.next.is_empty() { pair } else { self.next[pair].sample(rng) };
        PairTuple { pair, next }
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<PairTuple> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// Everything one run of the meta-algorithm needs.
#[derive(Debug, Clone)]
pub struct MetaProblem {
    pub ctx: Arc<PairContext>,
    /// Contraction factor `μ ∈ [0, 1)`.
    pub mu: f64,
    /// Target `v` for the raw network output, per pair.
    pub target: Vec<f64>,
    pub radius: f64,
    pub t: usize,
    pub eta: f64,
    pub dist: TupleDistribution,
}

impl MetaProblem {
    /// Problem with the standard stepsize `η = T^{-1/2}`.
    pub fn new(ctx: Arc<PairContext>, mu: f64, target: Vec<f64>, radius: f64, t: usize, dist: TupleDistribution) -> Result<Self> {
        let p = Self { ctx, mu, target, radius, t, eta: 1.0 / (t.max(1) as f64).sqrt(), dist };
        p.validate()?;
        Ok(p)
    }

    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        self.eta = eta;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let n = self.ctx.n_pairs();
        if !(0.0..1.0).contains(&self.mu) {
            return Err(LearnerError::Invalid(format!("mu = {} is outside [0, 1)", self.mu)));
        }
        if self.t == 0 || !(self.eta > 0.0) || !(self.radius > 0.0) {
            return Err(LearnerError::Invalid("T, eta and radius must be positive".into()));
        }
        if self.target.len() != n || self.dist.weights.len() != n {
            return Err(LearnerError::Invalid(format!("targets and weights need {n} entries")));
        }
        if self.target.iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::Invalid("non-finite target".into()));
        }
        if self.mu > 0.0 && self.dist.kernel.is_none() {
            return Err(LearnerError::Invalid("mu > 0 needs a next-pair kernel".into()));
        }
        Ok(())
    }

    /// Whether `T ≥ 64/(1-μ)²`, the horizon the convergence analysis assumes.
    pub fn within_theory_horizon(&self) -> bool {
        self.t as f64 >= 64.0 / ((1.0 - self.mu) * (1.0 - self.mu))
    }

    /// Draws the `T` tuples of one run.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<PairTuple>> {
        Ok(self.dist.sampler()?.sample_n(self.t, rng))
    }

    pub fn start(&self) -> TwoLayerNet {
        TwoLayerNet::new(self.ctx.init().clone(), self.radius).expect("radius validated")
    }

    /// Population mean of `(u_α(x) - v(x) - μ·E[u_α(x')|x])²`-style residuals
    /// is not needed; this is `E_w[(values - reference)²]`.
    pub fn weighted_mse(&self, values: &[f64], reference: &[f64]) -> f64 {
        weighted_mse(&self.dist.weights, values, reference)
    }
}

/// `Σ_p w_p (a_p - b_p)²`.
pub fn weighted_mse(weights: &[f64], a: &[f64], b: &[f64]) -> f64 {
    weights.iter().zip(a.iter().zip(b)).map(|(w, (x, y))| w * (x - y) * (x - y)).sum()
}

/// `δ_α = u_α(x) - v(x) - μ·u_α(x')`.
pub fn residual(net: &TwoLayerNet, x: &[f64], x_next: &[f64], mu: f64, v: f64) -> f64 {
    let next = if mu == 0.0 { 0.0 } else { net.forward_unchecked(x_next) };
    net.forward_unchecked(x) - v - mu * next
}

/// One projected step; returns the residual.
pub fn meta_step(net: &mut TwoLayerNet, x: &[f64], x_next: &[f64], mu: f64, v: f64, eta: f64) -> f64 {
    let delta = residual(net, x, x_next, mu, v);
    if delta != 0.0 {
        let g = net.grad(x).expect("input dimension matches");
        let mut alpha = net.alpha().to_vec();
        alpha.iter_mut().zip(&g).for_each(|(a, gi)| *a -= eta * delta * gi);
        let d: Vec<f64> = alpha.iter().zip(net.alpha0()).map(|(a, a0)| a - a0).collect();
        net.set_delta_unchecked(&d);
        net.project();
    }
    delta
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub residual: f64,
    pub update_norm: f64,
    pub distance_to_init: f64,
}

#[derive(Debug, Clone)]
pub struct LearnerOutput {
    /// `ᾱ = T⁻¹ Σ_{t<T} α(t)`.
    pub averaged: TwoLayerNet,
    pub final_net: TwoLayerNet,
    pub trace: Vec<TraceRow>,
}

/// Runs `T` steps from `α(0)` consuming `samples` in order.
pub fn run(problem: &MetaProblem, samples: &[PairTuple], trace: bool) -> Result<LearnerOutput> {
    run_from(problem, problem.start(), samples, trace)
}

/// As [`run`] from an arbitrary in-ball starting network.
pub fn run_from(problem: &MetaProblem, start: TwoLayerNet, samples: &[PairTuple], trace: bool) -> Result<LearnerOutput> {
    problem.validate()?;
    if samples.len() < problem.t {
        return Err(LearnerError::SampleShortage { needed: problem.t, got: samples.len() });
    }
    let ctx = &*problem.ctx;
    let init = ctx.init();
    let (m, d) = (init.m(), init.d());
    let signs = init.signs();
    let alpha0 = init.alpha0();
    let inv_sqrt_m = 1.0 / (m as f64).sqrt();
    let r2 = problem.radius * problem.radius;

    let mut alpha = start.alpha().to_vec();
    let mut norm2: f64 = alpha.iter().zip(alpha0).map(|(a, b)| (a - b) * (a - b)).sum();
    let mut sum = vec![0.0; m * d];
    let mut z = vec![0.0; m];
    let mut rows = Vec::new();

    let forward = |alpha: &[f64], x: &[f64], z: &mut [f64]| {
        let mut u = 0.0;
        for ((zi, w), b) in z.iter_mut().zip(alpha.chunks_exact(d)).zip(signs) {
            *zi = dot(w, x);
            if *zi > 0.0 {
                u += b * *zi;
            }
        }
        u * inv_sqrt_m
    };

    for (t, tup) in samples[..problem.t].iter().enumerate() {
        sum.iter_mut().zip(&alpha).for_each(|(s, a)| *s += a);
        let x = ctx.feature(tup.pair);
        let u_next = if problem.mu == 0.0 {
            0.0
        } else {
            let xn = ctx.feature(tup.next);
            alpha.chunks_exact(d).zip(signs).map(|(w, b)| b * dot(w, xn).max(0.0)).sum::<f64>() * inv_sqrt_m
        };
        let u = forward(&alpha, x, &mut z);
        let delta = u - problem.target[tup.pair] - problem.mu * u_next;
        let c = -problem.eta * delta * inv_sqrt_m;
        let mut active = 0usize;
        if c != 0.0 {
            let z0 = &ctx.z0[tup.pair * m..(tup.pair + 1) * m];
            let xx = ctx.x_norm2[tup.pair];
            for i in 0..m {
                if z[i] > 0.0 {
                    active += 1;
                    let cb = c * signs[i];
                    for (a, xj) in alpha[i * d..(i + 1) * d].iter_mut().zip(x) {
                        *a += cb * xj;
                    }
                    // ‖Δ_i + cb·x‖² - ‖Δ_i‖² with Δ_iᵀx = z_i - z0_i
                    norm2 += 2.0 * cb * (z[i] - z0[i]) + cb * cb * xx;
                }
            }
            if norm2 > r2 {
                norm2 = alpha.iter().zip(alpha0).map(|(a, b)| (a - b) * (a - b)).sum();
                if norm2 > r2 {
                    let shrink = problem.radius / norm2.sqrt();
                    for (a, a0) in alpha.iter_mut().zip(alpha0) {
                        *a = a0 + shrink * (*a - a0);
                    }
                    norm2 = r2;
                }
            }
        }
        if trace {
            rows.push(TraceRow {
                t,
                residual: delta,
                update_norm: (c.abs() * ctx.x_norm2[tup.pair].sqrt()) * (active as f64).sqrt(),
                distance_to_init: norm2.max(0.0).sqrt(),
            });
        }
    }

    let mut final_net = start.clone();
    let final_delta: Vec<f64> = alpha.iter().zip(alpha0).map(|(a, b)| a - b).collect();
    final_net.set_delta_unchecked(&final_delta);
    let inv_t = 1.0 / problem.t as f64;
    let avg_delta: Vec<f64> = sum.iter().zip(alpha0).map(|(s, a0)| s * inv_t - a0).collect();
    let mut averaged = start;
    averaged.set_delta_unchecked(&avg_delta);
    Ok(LearnerOutput { averaged, final_net, trace: rows })
}

/// Writes trace rows as one JSON object per line.
pub fn write_trace(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Actor subproblem: fit the energy `f_θ = u_θ - u_{θ(0)}` to
/// `τ_{k+1}(β_k⁻¹ Q_ω + τ_k⁻¹ f_k)` under `σ̃_k` (`μ = 0`).
#[allow(clippy::too_many_arguments)]
pub fn sgd_problem(
    ctx: Arc<PairContext>,
    q: &[f64],
    f_k: &[f64],
    tau_k1: f64,
    tau_k: f64,
    beta_k: f64,
    radius: f64,
    t: usize,
    sigma_aux: Vec<f64>,
) -> Result<MetaProblem> {
    let target = energy_target(q, f_k, tau_k1, tau_k, beta_k);
    let raw = target.iter().zip(ctx.u0()).map(|(v, u0)| v + u0).collect();
    MetaProblem::new(ctx, 0.0, raw, radius, t, TupleDistribution::pairs_only(sigma_aux))
}

/// `τ_{k+1}(β_k⁻¹ Q + τ_k⁻¹ f_k)`.
pub fn energy_target(q: &[f64], f_k: &[f64], tau_k1: f64, tau_k: f64, beta_k: f64) -> Vec<f64> {
    q.iter().zip(f_k).map(|(q, f)| tau_k1 * (q / beta_k + f / tau_k)).collect()
}

/// Runs the actor subproblem on `(s, a⁰)` pairs.
#[allow(clippy::too_many_arguments)]
pub fn sgd_policy_improvement(
    ctx: Arc<PairContext>,
    mdp: &FiniteMdp,
    q: &[f64],
    f_k: &[f64],
    tau_k1: f64,
    tau_k: f64,
    beta_k: f64,
    radius: f64,
    sigma_aux: Vec<f64>,
    samples: &[Transition],
    eta: Option<f64>,
) -> Result<LearnerOutput> {
    let mut problem = sgd_problem(ctx, q, f_k, tau_k1, tau_k, beta_k, radius, samples.len(), sigma_aux)?;
    if let Some(eta) = eta {
        problem = problem.with_eta(eta)?;
    }
    let tuples: Vec<PairTuple> = samples
        .iter()
        .map(|tr| {
            let p = mdp.pair(tr.s, tr.a0);
            PairTuple { pair: p, next: p }
        })
        .collect();
    run(&problem, &tuples, false)
}

/// Critic subproblem: semigradient TD toward `(1-γ)r + γ·E[Q(s', a')]` under `σ_k`.
pub fn td_problem(
    ctx: Arc<PairContext>,
    mdp: &FiniteMdp,
    pi: &PolicyTable,
    radius: f64,
    t: usize,
    sigma: Vec<f64>,
) -> Result<MetaProblem> {
    let target = mdp.reward_table().as_slice().iter().map(|r| (1.0 - mdp.gamma()) * r).collect();
    MetaProblem::new(ctx, mdp.gamma(), target, radius, t, TupleDistribution::on_policy(mdp, pi, sigma))
}

/// Runs the critic subproblem on `(s, a, s', a')` tuples.
pub fn td_policy_evaluation(
    ctx: Arc<PairContext>,
    mdp: &FiniteMdp,
    pi: &PolicyTable,
    radius: f64,
    sigma: Vec<f64>,
    samples: &[Transition],
    eta: Option<f64>,
) -> Result<LearnerOutput> {
    let mut problem = td_problem(ctx, mdp, pi, radius, samples.len(), sigma)?;
    if let Some(eta) = eta {
        problem = problem.with_eta(eta)?;
    }
    let tuples: Vec<PairTuple> = samples
        .iter()
        .map(|tr| PairTuple { pair: mdp.pair(tr.s, tr.a), next: mdp.pair(tr.s_next, tr.a_next) })
        .collect();
    run(&problem, &tuples, false)
}

/// Population update `ḡ_α = E[δ_α ∇_α u_α(x)]`, with the gradient and values
/// taken from `u_α` itself.
fn mean_update(problem: &MetaProblem, u: &[f64], grads: &[Vec<f64>]) -> Vec<f64> {
    let n = problem.ctx.n_pairs();
    let mut g = vec![0.0; grads[0].len()];
    for p in 0..n {
        let w = problem.dist.weights[p];
        if w == 0.0 {
            continue;
        }
        let next = problem.dist.kernel_row(p).map_or(0.0, |k| dot(k, u));
        let delta = u[p] - problem.target[p] - problem.mu * next;
        g.iter_mut().zip(&grads[p]).for_each(|(gi, di)| *gi += w * delta * di);
    }
    g
}

fn pair_grads(problem: &MetaProblem, net: &TwoLayerNet) -> Vec<Vec<f64>> {
    (0..problem.ctx.n_pairs()).map(|p| net.grad(problem.ctx.feature(p)).expect("dimension matches")).collect()
}

/// Monte-Carlo estimate of `E‖g_α - ḡ_α‖²` at `net` over `n_probes` tuples,
/// with the mean `ḡ_α` computed exactly.
pub fn empirical_update_variance<R: Rng + ?Sized>(
    problem: &MetaProblem,
    net: &TwoLayerNet,
    n_probes: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_probes == 0 {
        return Err(LearnerError::SampleShortage { needed: 1, got: 0 });
    }
    let u = problem.ctx.eval(net);
    let grads = pair_grads(problem, net);
    let mean = mean_update(problem, &u, &grads);
    let sampler = problem.dist.sampler()?;
    let mut total = 0.0;
    for _ in 0..n_probes {
        let tup = sampler.sample(rng);
        let delta = u[tup.pair] - problem.target[tup.pair] - problem.mu * u[tup.next];
        total += grads[tup.pair].iter().zip(&mean).map(|(gi, mi)| (delta * gi - mi).powi(2)).sum::<f64>();
    }
    Ok(total / n_probes as f64)
}

/// Exact `E‖g_α - ḡ_α‖²`.
pub fn update_variance(problem: &MetaProblem, net: &TwoLayerNet) -> f64 {
    let u = problem.ctx.eval(net);
    let grads = pair_grads(problem, net);
    let mean = mean_update(problem, &u, &grads);
    let n = problem.ctx.n_pairs();
    let mut total = 0.0;
    for p in 0..n {
        let w = problem.dist.weights[p];
        if w == 0.0 {
            continue;
        }
        let mut add = |q: f64, next: usize| {
            let delta = u[p] - problem.target[p] - problem.mu * u[next];
            total += q * grads[p].iter().zip(&mean).map(|(gi, mi)| (delta * gi - mi).powi(2)).sum::<f64>();
        };
        match problem.dist.kernel_row(p) {
            Some(k) => k.iter().enumerate().filter(|(_, q)| **q > 0.0).for_each(|(np, q)| add(w * q, np)),
            None => add(w, p),
        }
    }
    total
}

/// Fixed point `α* = Π(α* - η ḡ⁰_{α*})` of the projected population update of
/// the linearized network.
///
/// The fixed point does not depend on `η`; it is the solution of the
/// variational inequality `ḡ⁰_{α*} + c·(α* - α(0)) = 0`, `c ≥ 0`,
/// `c·(‖α* - α(0)‖ - R) = 0`. It is computed in the span of the pair
/// gradients, where `ḡ⁰` lives, and the fixed-point residual is then checked
/// in weight space against `tol`.
pub fn approximate_stationary_point(problem: &MetaProblem, tol: f64) -> Result<TwoLayerNet> {
    problem.validate()?;
    let ctx = &*problem.ctx;
    let n = ctx.n_pairs();
    let phi = ctx.linearized_jacobian();
    let gram = &phi * phi.transpose();
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let keep: Vec<usize> = (0..n).filter(|&j| eig.eigenvalues[j] > 1e-12 * top).collect();
    if keep.is_empty() {
        return Ok(problem.start());
    }
    let r = keep.len();
    let u = DMatrix::from_fn(n, r, |i, j| eig.eigenvectors[(i, keep[j])]);
    let sv = DVector::from_iterator(r, keep.iter().map(|&j| eig.eigenvalues[j].sqrt()));

    let w = DMatrix::from_diagonal(&DVector::from_column_slice(&problem.dist.weights));
    let mut a = DMatrix::<f64>::identity(n, n);
    if let Some(k) = &problem.dist.kernel {
        a -= DMatrix::from_row_slice(n, n, k) * problem.mu;
    }
    let u0 = DVector::from_column_slice(ctx.u0());
    let v = DVector::from_column_slice(&problem.target);
    let s_mat = DMatrix::from_diagonal(&sv);
    let m_mat = &s_mat * u.transpose() * &w * &a * &u * &s_mat;
    let rhs = &s_mat * u.transpose() * &w * (v - &a * u0);

    let solve = |c: f64| -> Option<DVector<f64>> {
        let sys = &m_mat + DMatrix::<f64>::identity(r, r) * c;
        sys.lu().solve(&rhs)
    };
    let radius = problem.radius;
    let mut coords = solve(0.0).filter(|s| s.norm() <= radius);
    if coords.is_none() {
        let mut hi = 1e-6f64;
        while solve(hi).is_none_or(|s| s.norm() > radius) {
            hi *= 2.0;
            if hi > 1e12 {
                return Err(LearnerError::Stationary("no multiplier brings the solution into the ball".into()));
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if solve(mid).is_none_or(|s| s.norm() > radius) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        coords = solve(hi);
    }
    let coords = coords.ok_or_else(|| LearnerError::Stationary("singular linear system".into()))?;
    let y = &u * DVector::from_iterator(r, coords.iter().zip(sv.iter()).map(|(c, s)| c / s));
    let delta = phi.transpose() * y;
    let mut net = problem.start();
    net.set_delta_unchecked(delta.as_slice());
    net.project();

    let alpha = net.alpha().to_vec();
    let lin = ctx.eval_linearized(&alpha);
    let mut g = DVector::zeros(phi.ncols());
    for p in 0..n {
        let next = problem.dist.kernel_row(p).map_or(0.0, |k| dot(k, &lin));
        let delta = lin[p] - problem.target[p] - problem.mu * next;
        g += phi.row(p).transpose() * (problem.dist.weights[p] * delta);
    }
    let mut moved = net.clone();
    let stepped: Vec<f64> = net.delta().iter().zip(g.iter()).map(|(d, gi)| d - problem.eta * gi).collect();
    moved.set_delta_unchecked(&stepped);
    moved.project();
    let resid = moved.alpha().iter().zip(net.alpha()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if !(resid <= tol) {
        return Err(LearnerError::Stationary(format!("fixed-point residual {resid:e} exceeds {tol:e}")));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{exact_q, stationary_state_action_distribution, MdpGenerator};
    use crate::seeded_rng;

    fn scalar_ctx(m: usize, seed: u64) -> Arc<PairContext> {
        let init = Arc::new(NetInit::from_seed(m, 1, seed).unwrap());
        Arc::new(PairContext::new(init, &[1.0]).unwrap())
    }

    #[test]
    fn residual_cases() {
        let init = Arc::new(NetInit::from_parts(1, vec![1.0], vec![0.0]).unwrap());
        let zero = TwoLayerNet::new(init, 1.0).unwrap();
        assert_eq!(residual(&zero, &[1.0], &[1.0], 0.5, 0.0), 0.0);
        let net = TwoLayerNet::init(16, 2, 1.0, &mut seeded_rng(0, 0)).unwrap();
        let (x, xn) = ([0.6, 0.0], [0.0, 0.8]);
        assert_eq!(residual(&net, &x, &xn, 0.0, 0.3), net.forward(&x).unwrap() - 0.3);
        let hand = net.forward(&x).unwrap() - 0.3 - 0.9 * net.forward(&xn).unwrap();
        assert!((residual(&net, &x, &xn, 0.9, 0.3) - hand).abs() < 1e-15);
    }

    #[test]
    fn small_step_is_unprojected() {
        let mut net = TwoLayerNet::init(32, 3, 5.0, &mut seeded_rng(1, 0)).unwrap();
        let x = [0.5, -0.5, 0.5];
        let before = net.clone();
        let g = net.grad(&x).unwrap();
        let delta = meta_step(&mut net, &x, &x, 0.0, 1.0, 1e-3);
        for ((a, b), gi) in net.alpha().iter().zip(before.alpha()).zip(&g) {
            assert!((a - (b - 1e-3 * delta * gi)).abs() < 1e-15);
        }
        let mut same = before.clone();
        let v = before.forward(&x).unwrap();
        meta_step(&mut same, &x, &x, 0.0, v, 0.1);
        assert_eq!(same, before);
    }

    #[test]
    fn single_step_average_is_start() {
        let ctx = scalar_ctx(8, 0);
        let problem = MetaProblem::new(ctx, 0.0, vec![2.0], 1.0, 1, TupleDistribution::pairs_only(vec![1.0])).unwrap();
        let out = run(&problem, &[PairTuple { pair: 0, next: 0 }], true).unwrap();
        assert_eq!(out.averaged, problem.start());
        assert_eq!(out.trace.len(), 1);
        assert!(matches!(run(&problem, &[], false), Err(LearnerError::SampleShortage { needed: 1, got: 0 })));
    }

    #[test]
    fn fast_loop_matches_reference_steps() {
        let mdp = MdpGenerator::new(3, 2, 0.8).generate(&mut seeded_rng(2, 0)).unwrap();
        let init = Arc::new(NetInit::from_seed(64, mdp.d(), 3).unwrap());
        let ctx = Arc::new(PairContext::for_mdp(init, &mdp).unwrap());
        let pi = PolicyTable::uniform(3, 2);
        let sigma = stationary_state_action_distribution(&mdp, &pi).unwrap();
        let problem = td_problem(ctx.clone(), &mdp, &pi, 0.3, 200, sigma.weights().to_vec()).unwrap();
        let samples = problem.sample(&mut seeded_rng(4, 0)).unwrap();
        let out = run(&problem, &samples, false).unwrap();

        let mut net = problem.start();
        let mut sum = vec![0.0; net.alpha().len()];
        for tup in &samples {
            sum.iter_mut().zip(net.alpha()).for_each(|(s, a)| *s += a);
            meta_step(&mut net, ctx.feature(tup.pair), ctx.feature(tup.next), problem.mu, problem.target[tup.pair], problem.eta);
            assert!(net.distance_to_init() <= 0.3 * (1.0 + 1e-12));
        }
        for (a, b) in out.final_net.alpha().iter().zip(net.alpha()) {
            assert!((a - b).abs() < 1e-12);
        }
        for ((a, s), a0) in out.averaged.alpha().iter().zip(&sum).zip(net.alpha0()) {
            assert!((a - s / 200.0).abs() < 1e-12, "{a} {} {a0}", s / 200.0);
        }
    }

    #[test]
    fn deterministic_single_pair_has_no_variance() {
        let ctx = scalar_ctx(16, 1);
        let problem = MetaProblem::new(ctx, 0.0, vec![0.4], 1.0, 10, TupleDistribution::pairs_only(vec![1.0])).unwrap();
        let net = problem.start();
        assert_eq!(empirical_update_variance(&problem, &net, 100, &mut seeded_rng(0, 0)).unwrap(), 0.0);
        assert_eq!(update_variance(&problem, &net), 0.0);
    }

    #[test]
    fn monte_carlo_variance_tracks_exact() {
        let mdp = MdpGenerator::new(3, 2, 0.8).generate(&mut seeded_rng(5, 0)).unwrap();
        let init = Arc::new(NetInit::from_seed(128, mdp.d(), 6).unwrap());
        let ctx = Arc::new(PairContext::for_mdp(init, &mdp).unwrap());
        let pi = PolicyTable::uniform(3, 2);
        let sigma = stationary_state_action_distribution(&mdp, &pi).unwrap();
        let problem = td_problem(ctx, &mdp, &pi, 1.0, 100, sigma.weights().to_vec()).unwrap();
        let net = problem.start();
        let exact = update_variance(&problem, &net);
        let mc = empirical_update_variance(&problem, &net, 200_000, &mut seeded_rng(7, 0)).unwrap();
        assert!((mc - exact).abs() < 0.02 * exact, "{mc} vs {exact}");
    }

    #[test]
    fn zero_target_stationary_point_is_the_projection_of_zero() {
        let mdp = MdpGenerator::new(3, 2, 0.8).generate(&mut seeded_rng(8, 0)).unwrap();
        let init = Arc::new(NetInit::from_seed(256, mdp.d(), 9).unwrap());
        let ctx = Arc::new(PairContext::for_mdp(init, &mdp).unwrap());
        let w = vec![1.0 / 6.0; 6];
        let zero_raw: Vec<f64> = vec![0.0; 6];
        let problem = MetaProblem::new(ctx.clone(), 0.0, zero_raw, 10.0, 100, TupleDistribution::pairs_only(w)).unwrap();
        let star = approximate_stationary_point(&problem, 1e-9).unwrap();
        let lin = ctx.eval_linearized(star.alpha());
        assert!(lin.iter().all(|x| x.abs() < 1e-9), "{lin:?}");
    }

    #[test]
    fn td_stationary_point_recovers_q_when_radius_is_generous() {
        let mdp = MdpGenerator::new(3, 2, 0.8).generate(&mut seeded_rng(10, 0)).unwrap();
        let init = Arc::new(NetInit::from_seed(512, mdp.d(), 11).unwrap());
        let ctx = Arc::new(PairContext::for_mdp(init, &mdp).unwrap());
        let pi = PolicyTable::uniform(3, 2);
        let sigma = stationary_state_action_distribution(&mdp, &pi).unwrap();
        let problem = td_problem(ctx.clone(), &mdp, &pi, 100.0, 100, sigma.weights().to_vec()).unwrap();
        let star = approximate_stationary_point(&problem, 1e-8).unwrap();
        let q = exact_q(&mdp, &pi).unwrap();
        let err = weighted_mse(sigma.weights(), &ctx.eval_linearized(star.alpha()), q.as_slice());
        assert!(err < 1e-12, "{err}");
    }
}
