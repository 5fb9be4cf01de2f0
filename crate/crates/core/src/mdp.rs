//! Finite MDPs and the exact quantities a policy induces on them.
//!
//! Values follow the normalized convention `Q = (1 - γ)·E[Σ γ^t r_t]`, so
//! `|Q^π| ≤ R_max` for every policy. Stationary distributions are those of
//! the state chain induced by the policy (not discounted visitation).

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::SaTable;

/// Tolerance on row sums of stochastic tables.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Power-iteration stopping tolerance (sup-norm change per sweep).
pub const STATIONARY_TOL: f64 = 1e-13;
/// Power-iteration sweep cap.
pub const STATIONARY_MAX_ITERS: usize = 1_000_000;
/// Default transition floor applied by the generator.
pub const DEFAULT_EPS_MIX: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("power iteration did not converge after {iterations} sweeps (last change {change:e}); the induced chain is not ergodic")]
    NonErgodic { iterations: usize, change: f64 },
    #[error("linear solve failed: {0}")]
    LinearSolve(String),
    #[error("mdp violates its invariants: {}", fmt_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn fmt_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

pub type Result<T, E = MdpError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    RowStochasticity,
    NegativeProbability,
    MixingFloor,
    Discount,
    NonFiniteReward,
    FeatureNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            ViolationKind::RowStochasticity => "row stochasticity",
            ViolationKind::NegativeProbability => "negative probability",
            ViolationKind::MixingFloor => "mixing floor",
            ViolationKind::Discount => "discount",
            ViolationKind::NonFiniteReward => "non-finite reward",
            ViolationKind::FeatureNorm => "feature norm",
        };
        write!(f, "{name}: {}", self.message)
    }
}

/// Outcome of [`FiniteMdp::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub r_max: f64,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// A finite MDP with each state-action pair embedded in the unit ball of `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    reward: Vec<f64>,
    transition: Vec<f64>,
    features: Vec<f64>,
    d: usize,
    eps_mix: Option<f64>,
}

impl FiniteMdp {
    /// Assembles an MDP, checking shapes only. Semantic invariants are
    /// reported by [`FiniteMdp::validate`]. Without explicit features every
    /// pair gets its own one-hot unit vector (`d = |S|·|A|`).
    pub fn new(
        gamma: f64,
        reward: Vec<Vec<f64>>,
        transition: Vec<Vec<Vec<f64>>>,
        features: Option<Vec<Vec<Vec<f64>>>>,
        eps_mix: Option<f64>,
    ) -> Result<Self> {
        let n_states = reward.len();
        if n_states == 0 {
            return Err(MdpError::Dimension("at least one state is required".into()));
        }
        let n_actions = reward[0].len();
        if n_actions == 0 {
            return Err(MdpError::Dimension("at least one action is required".into()));
        }
        if reward.iter().any(|r| r.len() != n_actions) {
            return Err(MdpError::Dimension("reward rows must all have n_actions entries".into()));
        }
        if transition.len() != n_states
            || transition.iter().any(|t| t.len() != n_actions || t.iter().any(|row| row.len() != n_states))
        {
            return Err(MdpError::Dimension(format!(
                "transition must be {n_states} x {n_actions} x {n_states}"
            )));
        }
        let n_pairs = n_states * n_actions;
        let (features, d) = match features {
            Some(f) => {
                let d = f.first().and_then(|r| r.first()).map_or(0, Vec::len);
                if d == 0
                    || f.len() != n_states
                    || f.iter().any(|r| r.len() != n_actions || r.iter().any(|x| x.len() != d))
                {
                    return Err(MdpError::Dimension(format!(
                        "features must be {n_states} x {n_actions} x d with d >= 1"
                    )));
                }
                (f.into_iter().flatten().flatten().collect(), d)
            }
            None => {
                let mut flat = vec![0.0; n_pairs * n_pairs];
                for p in 0..n_pairs {
                    flat[p * n_pairs + p] = 1.0;
                }
                (flat, n_pairs)
            }
        };
        Ok(Self {
            n_states,
            n_actions,
            gamma,
            reward: reward.concat(),
            transition: transition.into_iter().flatten().flatten().collect(),
            features,
            d,
            eps_mix,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn eps_mix(&self) -> Option<f64> {
        self.eps_mix
    }

    /// Flat index of `(s, a)`.
    #[inline]
    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[self.pair(s, a)]
    }

    pub fn reward_table(&self) -> SaTable {
        SaTable::from_flat(self.n_states, self.n_actions, self.reward.clone())
    }

    /// `P(· | s, a)`.
    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let p = self.pair(s, a);
        &self.transition[p * self.n_states..(p + 1) * self.n_states]
    }

    #[inline]
    pub fn feature(&self, s: usize, a: usize) -> &[f64] {
        self.pair_feature(self.pair(s, a))
    }

    #[inline]
    pub fn pair_feature(&self, pair: usize) -> &[f64] {
        &self.features[pair * self.d..(pair + 1) * self.d]
    }

    /// All pair features, `n_pairs x d` row-major.
    pub fn features_flat(&self) -> &[f64] {
        &self.features
    }

    pub fn r_max(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Reports every violated invariant; an empty list means the MDP is valid.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let mut push = |kind, message: String| violations.push(Violation { kind, message });
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            push(ViolationKind::Discount, format!("gamma = {} is outside (0, 1)", self.gamma));
        }
        if let Some((p, r)) = self.reward.iter().enumerate().find(|(_, r)| !r.is_finite()) {
            push(ViolationKind::NonFiniteReward, format!("reward at pair {p} is {r}"));
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.transition_row(s, a);
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL || !sum.is_finite() {
                    push(ViolationKind::RowStochasticity, format!("P(.|{s},{a}) sums to {sum}"));
                }
                if let Some(x) = row.iter().find(|x| !(**x >= 0.0)) {
                    push(ViolationKind::NegativeProbability, format!("P(.|{s},{a}) has entry {x}"));
                }
                if let Some(eps) = self.eps_mix {
                    let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
                    if min < eps * (1.0 - 1e-9) {
                        push(ViolationKind::MixingFloor, format!("P(.|{s},{a}) has entry {min} below floor {eps}"));
                    }
                }
                let norm = l2(self.feature(s, a));
                if !(norm <= 1.0 + 1e-12) {
                    push(ViolationKind::FeatureNorm, format!("feature of ({s},{a}) has norm {norm}"));
                }
            }
        }
        ValidationReport { violations, r_max: self.r_max() }
    }

    /// Errors with [`MdpError::Invalid`] unless every invariant holds.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        if report.is_valid() {
            Ok(())
        } else {
            Err(MdpError::Invalid(report.violations))
        }
    }

    pub fn to_file(&self) -> MdpFile {
        let reward = self.reward_table().rows();
        let transition = (0..self.n_states)
            .map(|s| (0..self.n_actions).map(|a| self.transition_row(s, a).to_vec()).collect())
            .collect();
        let features = (0..self.n_states)
            .map(|s| (0..self.n_actions).map(|a| self.feature(s, a).to_vec()).collect())
            .collect();
        MdpFile {
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.gamma,
            reward,
            transition,
            features: Some(features),
            eps_mix: self.eps_mix,
        }
    }

    pub fn from_file(file: MdpFile) -> Result<Self> {
        if file.reward.len() != file.n_states || file.reward.iter().any(|r| r.len() != file.n_actions) {
            return Err(MdpError::Dimension("reward does not match n_states x n_actions".into()));
        }
        Self::new(file.gamma, file.reward, file.transition, file.features, file.eps_mix)
    }

    /// Serialized form written by [`FiniteMdp::save`].
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_file()).expect("mdp serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Loads an MDP spec file, rejecting any file that violates the invariants.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MdpFile = serde_json::from_str(text)?;
        let mdp = Self::from_file(file)?;
        mdp.ensure_valid()?;
        Ok(mdp)
    }
}

/// On-disk MDP description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub reward: Vec<Vec<f64>>,
    pub transition: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_mix: Option<f64>,
}

/// How state-action pairs are embedded in `R^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureMap {
    /// Independent uniformly random directions, scaled to norm `scale`.
    RandomUnit { d: usize, scale: f64 },
    /// Standard basis vectors, `d = |S|·|A|`.
    OneHot,
}

impl Default for FeatureMap {
    fn default() -> Self {
        FeatureMap::RandomUnit { d: 8, scale: 0.9 }
    }
}

/// Random MDP generator: `U[-1, 1]` rewards, flat-Dirichlet transition rows
/// mixed with uniform so that every entry is at least `eps_mix`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpGenerator {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub eps_mix: f64,
    pub features: FeatureMap,
}

impl MdpGenerator {
    pub fn new(n_states: usize, n_actions: usize, gamma: f64) -> Self {
        Self { n_states, n_actions, gamma, eps_mix: DEFAULT_EPS_MIX, features: FeatureMap::default() }
    }

    pub fn with_eps_mix(mut self, eps_mix: f64) -> Self {
        self.eps_mix = eps_mix;
        self
    }

    pub fn with_features(mut self, features: FeatureMap) -> Self {
        self.features = features;
        self
    }

    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<FiniteMdp> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(MdpError::Dimension("sizes must be at least 1".into()));
        }
        if !(self.eps_mix >= 0.0 && self.eps_mix * ns as f64 <= 1.0) {
            return Err(MdpError::Dimension(format!(
                "eps_mix = {} must satisfy 0 <= eps_mix * n_states <= 1",
                self.eps_mix
            )));
        }
        let reward: Vec<Vec<f64>> =
            (0..ns).map(|_| (0..na).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect();
        let keep = 1.0 - self.eps_mix * ns as f64;
        let transition: Vec<Vec<Vec<f64>>> = (0..ns)
            .map(|_| {
                (0..na)
                    .map(|_| {
                        let raw: Vec<f64> = (0..ns).map(|_| rng.sample::<f64, _>(Exp1)).collect();
                        let total: f64 = raw.iter().sum();
                        let mut row: Vec<f64> = raw.iter().map(|x| keep * x / total + self.eps_mix).collect();
                        // renormalize so the row sums to 1 to the last ulp budget
                        let sum: f64 = row.iter().sum();
                        row.iter_mut().for_each(|x| *x /= sum);
                        row
                    })
                    .collect()
            })
            .collect();
        let features = match self.features {
            FeatureMap::OneHot => None,
            FeatureMap::RandomUnit { d, scale } => {
                if d == 0 || !(scale > 0.0 && scale <= 1.0) {
                    return Err(MdpError::Dimension("random features need d >= 1 and scale in (0, 1]".into()));
                }
                Some(
                    (0..ns)
                        .map(|_| {
                            (0..na)
                                .map(|_| loop {
                                    let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                                    let n = l2(&v);
                                    if n > 1e-8 {
                                        break v.iter().map(|x| scale * x / n).collect();
                                    }
                                })
                                .collect()
                        })
                        .collect(),
                )
            }
        };
        let eps = if self.eps_mix > 0.0 { Some(self.eps_mix) } else { None };
        FiniteMdp::new(self.gamma, reward, transition, features, eps)
    }
}

/// A stochastic policy `π(a | s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    probs: SaTable,
}

impl PolicyTable {
    /// Wraps a probability table after checking that each row is a distribution.
    pub fn new(probs: SaTable) -> Result<Self> {
        for s in 0..probs.n_states() {
            let row = probs.row(s);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MdpError::InvalidPolicy(format!("row {s} = {row:?} is not a distribution")));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: SaTable::filled(n_states, n_actions, 1.0 / n_actions as f64) }
    }

    /// The deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let probs = SaTable::from_fn(actions.len(), n_actions, |s, a| if actions[s] == a { 1.0 } else { 0.0 });
        Self { probs }
    }

    /// A random full-support policy; rows are flat-Dirichlet draws.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        let mut probs = SaTable::zeros(n_states, n_actions);
        for s in 0..n_states {
            let raw: Vec<f64> = (0..n_actions).map(|_| rng.sample::<f64, _>(Exp1) + 1e-12).collect();
            let total: f64 = raw.iter().sum();
            for (a, x) in raw.iter().enumerate() {
                probs.set(s, a, x / total);
            }
        }
        Self { probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.n_actions()
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs.get(s, a)
    }

    pub fn row(&self, s: usize) -> &[f64] {
        self.probs.row(s)
    }

    pub fn table(&self) -> &SaTable {
        &self.probs
    }

    fn check_shape(&self, mdp: &FiniteMdp) -> Result<()> {
        if self.n_states() != mdp.n_states() || self.n_actions() != mdp.n_actions() {
            return Err(MdpError::Dimension(format!(
                "policy is {}x{} but mdp is {}x{}",
                self.n_states(),
                self.n_actions(),
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }
}

/// A distribution over states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDistribution(Vec<f64>);

impl StateDistribution {
    pub fn new(weights: Vec<f64>) -> Self {
        Self(weights)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn get(&self, s: usize) -> f64 {
        self.0[s]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A distribution over state-action pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateActionDistribution(SaTable);

impl StateActionDistribution {
    pub fn new(weights: SaTable) -> Self {
        Self(weights)
    }

    #[inline]
    pub fn weight(&self, s: usize, a: usize) -> f64 {
        self.0.get(s, a)
    }

    /// Flat weights indexed by [`FiniteMdp::pair`].
    pub fn weights(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn table(&self) -> &SaTable {
        &self.0
    }

    /// `E[g(s, a)]` as an exact finite sum.
    pub fn expect(&self, g: impl Fn(usize, usize) -> f64) -> f64 {
        let mut total = 0.0;
        for s in 0..self.0.n_states() {
            for a in 0..self.0.n_actions() {
                let w = self.0.get(s, a);
                if w != 0.0 {
                    total += w * g(s, a);
                }
            }
        }
        total
    }
}

/// The state chain `P^π[s][s'] = Σ_a π(a|s) P(s'|s,a)`.
pub fn policy_transition(mdp: &FiniteMdp, pi: &PolicyTable) -> Result<DMatrix<f64>> {
    pi.check_shape(mdp)?;
    let n = mdp.n_states();
    let mut m = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            let w = pi.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for (sp, p) in mdp.transition_row(s, a).iter().enumerate() {
                m[(s, sp)] += w * p;
            }
        }
    }
    Ok(m)
}

/// Left fixed point `ν P = ν` of a row-stochastic matrix by power iteration.
pub fn stationary_of(p: &DMatrix<f64>) -> Result<StateDistribution> {
    let n = p.nrows();
    let mut nu = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let mut change = f64::INFINITY;
    for _ in 0..STATIONARY_MAX_ITERS {
        next.iter_mut().for_each(|x| *x = 0.0);
        for (s, &w) in nu.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (sp, x) in next.iter_mut().enumerate() {
                *x += w * p[(s, sp)];
            }
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= total);
        change = nu.iter().zip(&next).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        std::mem::swap(&mut nu, &mut next);
        if change <= STATIONARY_TOL {
            return Ok(StateDistribution(nu));
        }
    }
    Err(MdpError::NonErgodic { iterations: STATIONARY_MAX_ITERS, change })
}

/// `ν_π`, the stationary state distribution of the chain induced by `pi`.
pub fn stationary_state_distribution(mdp: &FiniteMdp, pi: &PolicyTable) -> Result<StateDistribution> {
    stationary_of(&policy_transition(mdp, pi)?)
}

/// `σ_π(s, a) = π(a|s)·ν_π(s)`.
pub fn stationary_state_action_distribution(mdp: &FiniteMdp, pi: &PolicyTable) -> Result<StateActionDistribution> {
    let nu = stationary_state_distribution(mdp, pi)?;
    Ok(state_action_from(&nu, pi))
}

pub fn state_action_from(nu: &StateDistribution, pi: &PolicyTable) -> StateActionDistribution {
    StateActionDistribution(SaTable::from_fn(pi.n_states(), pi.n_actions(), |s, a| nu.get(s) * pi.prob(s, a)))
}

/// `σ̃_k = ν_{π_k} ⊗ π_0` with `π_0` uniform.
pub fn auxiliary_distribution(mdp: &FiniteMdp, pi_k: &PolicyTable) -> Result<StateActionDistribution> {
    let nu = stationary_state_distribution(mdp, pi_k)?;
    Ok(auxiliary_from(&nu, mdp.n_actions()))
}

pub fn auxiliary_from(nu: &StateDistribution, n_actions: usize) -> StateActionDistribution {
    let u = 1.0 / n_actions as f64;
    StateActionDistribution(SaTable::from_fn(nu.len(), n_actions, |s, _| nu.get(s) * u))
}

/// Exact `Q^π` from the linear system `(I - γ P Π) Q = (1 - γ) r`.
pub fn exact_q(mdp: &FiniteMdp, pi: &PolicyTable) -> Result<SaTable> {
    pi.check_shape(mdp)?;
    let n = mdp.n_pairs();
    let (ns, na, gamma) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let mut a_mat = DMatrix::<f64>::identity(n, n);
    for s in 0..ns {
        for a in 0..na {
            let p = mdp.pair(s, a);
            for (sp, prob) in mdp.transition_row(s, a).iter().enumerate() {
                for ap in 0..na {
                    a_mat[(p, mdp.pair(sp, ap))] -= gamma * prob * pi.prob(sp, ap);
                }
            }
        }
    }
    let rhs = DVector::from_iterator(n, (0..n).map(|p| (1.0 - gamma) * mdp.reward[p]));
    let lu = a_mat.clone().lu();
    let mut q = lu
        .solve(&rhs)
        .ok_or_else(|| MdpError::LinearSolve(format!("singular Bellman system (gamma = {gamma})")))?;
    // one step of iterative refinement
    let resid = &rhs - &a_mat * &q;
    if let Some(dq) = lu.solve(&resid) {
        q += dq;
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(MdpError::LinearSolve("non-finite solution".into()));
    }
    Ok(SaTable::from_flat(ns, na, q.iter().copied().collect()))
}

/// `V^π(s) = ⟨Q^π(s, ·), π(·|s)⟩`.
pub fn exact_v(mdp: &FiniteMdp, pi: &PolicyTable) -> Result<Vec<f64>> {
    let q = exact_q(mdp, pi)?;
    Ok(v_from_q(&q, pi))
}

pub fn v_from_q(q: &SaTable, pi: &PolicyTable) -> Vec<f64> {
    (0..q.n_states()).map(|s| dot(q.row(s), pi.row(s))).collect()
}

/// `‖Q - (1-γ) r - γ P Π Q‖_∞`.
pub fn bellman_residual(mdp: &FiniteMdp, pi: &PolicyTable, q: &SaTable) -> f64 {
    let v = v_from_q(q, pi);
    let mut worst = 0.0f64;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let next = dot(mdp.transition_row(s, a), &v);
            let target = (1.0 - mdp.gamma()) * mdp.reward(s, a) + mdp.gamma() * next;
            worst = worst.max((q.get(s, a) - target).abs());
        }
    }
    worst
}

/// Exact quantities induced by one policy, computed once and shared.
#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    pub nu: StateDistribution,
    pub sigma: StateActionDistribution,
    pub sigma_aux: StateActionDistribution,
    pub q: SaTable,
    pub v: Vec<f64>,
}

impl PolicyEvaluation {
    pub fn new(mdp: &FiniteMdp, pi: &PolicyTable) -> Result<Self> {
        let nu = stationary_state_distribution(mdp, pi)?;
        let sigma = state_action_from(&nu, pi);
        let sigma_aux = auxiliary_from(&nu, mdp.n_actions());
        let q = exact_q(mdp, pi)?;
        let v = v_from_q(&q, pi);
        Ok(Self { nu, sigma, sigma_aux, q, v })
    }
}

/// One tuple `(s, a, a⁰, s', a')` as consumed by the PPO loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub a0: usize,
    pub s_next: usize,
    pub a_next: usize,
}

/// How `(s, a)` is drawn for a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SamplingMode {
    /// i.i.d. draws from the exact stationary `σ_π`.
    #[default]
    Stationary,
    /// A single trajectory after `burn_in` steps; consecutive pairs are correlated.
    Rollout { burn_in: usize },
}

/// Precomputed categorical samplers for `σ_π`, `P(·|s,a)` and `π(·|s)`.
#[derive(Debug, Clone)]
pub struct TupleSampler {
    n_actions: usize,
    pair: WeightedIndex<f64>,
    next_state: Vec<WeightedIndex<f64>>,
    action: Vec<WeightedIndex<f64>>,
}

impl TupleSampler {
    pub fn new(mdp: &FiniteMdp, pi: &PolicyTable, sigma: &StateActionDistribution) -> Result<Self> {
        pi.check_shape(mdp)?;
        let bad = |e| MdpError::InvalidPolicy(format!("cannot sample: {e}"));
        let pair = WeightedIndex::new(sigma.weights().iter().copied()).map_err(bad)?;
        let next_state = (0..mdp.n_pairs())
            .map(|p| WeightedIndex::new(mdp.transition_row(p / mdp.n_actions(), p % mdp.n_actions()).iter().copied()))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(bad)?;
        let action = (0..mdp.n_states())
            .map(|s| WeightedIndex::new(pi.row(s).iter().copied()))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(bad)?;
        Ok(Self { n_actions: mdp.n_actions(), pair, next_state, action })
    }

    fn complete<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> Transition {
        let a0 = rng.random_range(0..self.n_actions);
        let s_next = self.next_state[s * self.n_actions + a].sample(rng);
        let a_next = self.action[s_next].sample(rng);
        Transition { s, a, a0, s_next, a_next }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Transition {
        let p = self.pair.sample(rng);
        self.complete(p / self.n_actions, p % self.n_actions, rng)
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> Vec<Transition> {
        (0..t).map(|_| self.sample(rng)).collect()
    }

    /// Follows the chain: each tuple starts where the previous one ended.
    pub fn rollout<R: Rng + ?Sized>(&self, t: usize, burn_in: usize, rng: &mut R) -> Vec<Transition> {
        let start = self.pair.sample(rng);
        let (mut s, mut a) = (start / self.n_actions, start % self.n_actions);
        for _ in 0..burn_in {
            let tr = self.complete(s, a, rng);
            (s, a) = (tr.s_next, tr.a_next);
        }
        let mut out = Vec::with_capacity(t);
        for _ in 0..t {
            let tr = self.complete(s, a, rng);
            (s, a) = (tr.s_next, tr.a_next);
            out.push(tr);
        }
        out
    }
}

/// Draws `t` tuples with `(s, a) ∼ σ_π` exactly, `a⁰ ∼ π_0(·|s)`,
/// `s' ∼ P(·|s, a)` and `a' ∼ π(·|s')`.
pub fn sample_batch<R: Rng + ?Sized>(mdp: &FiniteMdp, pi: &PolicyTable, t: usize, rng: &mut R) -> Result<Vec<Transition>> {
    let sigma = stationary_state_action_distribution(mdp, pi)?;
    Ok(TupleSampler::new(mdp, pi, &sigma)?.sample_batch(t, rng))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    pub(crate) fn two_state_symmetric() -> FiniteMdp {
        FiniteMdp::new(
            0.9,
            vec![vec![0.0, 1.0], vec![0.5, -0.5]],
            vec![vec![vec![0.5, 0.5]; 2]; 2],
            None,
            None,
        )
        .unwrap()
    }

    #[test]
    fn broken_row_is_reported() {
        let mdp = FiniteMdp::new(0.9, vec![vec![0.0]], vec![vec![vec![0.9]]], None, None).unwrap();
        let report = mdp.validate();
        assert!(report.violations.iter().any(|v| v.kind == ViolationKind::RowStochasticity));
        assert!(report.violations[0].to_string().starts_with("row stochasticity"));
    }

    #[test]
    fn zero_rewards_are_valid() {
        let mdp = FiniteMdp::new(0.5, vec![vec![0.0, 0.0]; 2], vec![vec![vec![0.5, 0.5]; 2]; 2], None, None).unwrap();
        let report = mdp.validate();
        assert!(report.is_valid(), "{:?}", report.violations);
        assert_eq!(report.r_max, 0.0);
    }

    #[test]
    fn generated_mdp_validates() {
        let mdp = MdpGenerator::new(5, 3, 0.9).generate(&mut seeded_rng(3, 0)).unwrap();
        assert!(mdp.validate().is_valid());
        assert_eq!(mdp.d(), 8);
    }

    #[test]
    fn floor_and_discount_violations() {
        let mdp = FiniteMdp::new(1.0, vec![vec![0.0]; 2], vec![vec![vec![1.0, 0.0]]; 2], None, Some(1e-3)).unwrap();
        let kinds: Vec<_> = mdp.validate().violations.into_iter().map(|v| v.kind).collect();
        assert!(kinds.contains(&ViolationKind::Discount));
        assert!(kinds.contains(&ViolationKind::MixingFloor));
    }

    #[test]
    fn one_state_chain() {
        let mdp = FiniteMdp::new(0.9, vec![vec![2.0]], vec![vec![vec![1.0]]], None, None).unwrap();
        let pi = PolicyTable::uniform(1, 1);
        let p = policy_transition(&mdp, &pi).unwrap();
        assert_eq!(p[(0, 0)], 1.0);
        assert_eq!(stationary_state_distribution(&mdp, &pi).unwrap().weights(), &[1.0]);
    }

    #[test]
    fn action_independent_kernel_passes_through() {
        let kernel = [[0.3, 0.7], [0.6, 0.4]];
        let tr = (0..2).map(|s| vec![kernel[s].to_vec(); 3]).collect();
        let mdp = FiniteMdp::new(0.9, vec![vec![0.0; 3]; 2], tr, None, None).unwrap();
        let pi = PolicyTable::random(2, 3, &mut seeded_rng(1, 0));
        let p = policy_transition(&mdp, &pi).unwrap();
        for s in 0..2 {
            for sp in 0..2 {
                assert!((p[(s, sp)] - kernel[s][sp]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn symmetric_chain_is_uniform() {
        let mdp = two_state_symmetric();
        let pi = PolicyTable::uniform(2, 2);
        let nu = stationary_state_distribution(&mdp, &pi).unwrap();
        assert_eq!(nu.weights(), &[0.5, 0.5]);
        let sigma = stationary_state_action_distribution(&mdp, &pi).unwrap();
        assert!(sigma.weights().iter().all(|w| (*w - 0.25).abs() < 1e-15));
    }

    #[test]
    fn deterministic_policy_support() {
        let mdp = two_state_symmetric();
        let pi = PolicyTable::deterministic(2, &[1, 0]);
        let sigma = stationary_state_action_distribution(&mdp, &pi).unwrap();
        assert_eq!(sigma.weight(0, 0), 0.0);
        assert_eq!(sigma.weight(1, 1), 0.0);
        assert!(sigma.weight(0, 1) > 0.0 && sigma.weight(1, 0) > 0.0);
    }

    #[test]
    fn periodic_chain_is_rejected() {
        // 0 -> {1, 2}, {1, 2} -> 0; the uniform start oscillates forever
        let tr = vec![vec![vec![0.0, 0.5, 0.5]], vec![vec![1.0, 0.0, 0.0]], vec![vec![1.0, 0.0, 0.0]]];
        let mdp = FiniteMdp::new(0.9, vec![vec![0.0]; 3], tr, None, None).unwrap();
        let err = stationary_state_distribution(&mdp, &PolicyTable::uniform(3, 1)).unwrap_err();
        assert!(matches!(err, MdpError::NonErgodic { .. }));
    }

    #[test]
    fn auxiliary_cases() {
        let mdp = FiniteMdp::new(0.9, vec![vec![1.0, 0.0]], vec![vec![vec![1.0]; 2]], None, None).unwrap();
        let aux = auxiliary_distribution(&mdp, &PolicyTable::deterministic(2, &[0])).unwrap();
        assert_eq!(aux.weights(), &[0.5, 0.5]);

        let mdp = MdpGenerator::new(4, 3, 0.8).generate(&mut seeded_rng(9, 0)).unwrap();
        let pi = PolicyTable::uniform(4, 3);
        let aux = auxiliary_distribution(&mdp, &pi).unwrap();
        let sigma = stationary_state_action_distribution(&mdp, &pi).unwrap();
        assert_eq!(aux, sigma);
    }

    #[test]
    fn single_pair_q_is_reward() {
        for gamma in [0.1, 0.5, 0.99] {
            let mdp = FiniteMdp::new(gamma, vec![vec![0.7]], vec![vec![vec![1.0]]], None, None).unwrap();
            let pi = PolicyTable::uniform(1, 1);
            assert!((exact_q(&mdp, &pi).unwrap().get(0, 0) - 0.7).abs() < 1e-14);
            assert!((exact_v(&mdp, &pi).unwrap()[0] - 0.7).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_reward_q_vanishes() {
        let mdp = FiniteMdp::new(0.9, vec![vec![0.0; 2]; 3], vec![vec![vec![0.2, 0.3, 0.5]; 2]; 3], None, None).unwrap();
        let pi = PolicyTable::uniform(3, 2);
        assert_eq!(exact_q(&mdp, &pi).unwrap().max_abs(), 0.0);
        assert!(exact_v(&mdp, &pi).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn policy_shape_mismatch() {
        let mdp = two_state_symmetric();
        assert!(matches!(policy_transition(&mdp, &PolicyTable::uniform(3, 2)), Err(MdpError::Dimension(_))));
        assert!(matches!(exact_q(&mdp, &PolicyTable::uniform(2, 3)), Err(MdpError::Dimension(_))));
    }

    #[test]
    fn trivial_batch() {
        let mdp = FiniteMdp::new(0.9, vec![vec![1.0]], vec![vec![vec![1.0]]], None, None).unwrap();
        let batch = sample_batch(&mdp, &PolicyTable::uniform(1, 1), 20, &mut seeded_rng(0, 0)).unwrap();
        assert!(batch.iter().all(|t| *t == Transition { s: 0, a: 0, a0: 0, s_next: 0, a_next: 0 }));
    }

    #[test]
    fn batches_are_seed_deterministic() {
        let mdp = MdpGenerator::new(5, 3, 0.9).generate(&mut seeded_rng(1, 0)).unwrap();
        let pi = PolicyTable::random(5, 3, &mut seeded_rng(2, 0));
        let a = sample_batch(&mdp, &pi, 500, &mut seeded_rng(7, 1)).unwrap();
        let b = sample_batch(&mdp, &pi, 500, &mut seeded_rng(7, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rollout_is_a_trajectory() {
        let mdp = MdpGenerator::new(4, 2, 0.9).generate(&mut seeded_rng(5, 0)).unwrap();
        let pi = PolicyTable::uniform(4, 2);
        let sigma = stationary_state_action_distribution(&mdp, &pi).unwrap();
        let sampler = TupleSampler::new(&mdp, &pi, &sigma).unwrap();
        let tr = sampler.rollout(100, 10, &mut seeded_rng(0, 0));
        for w in tr.windows(2) {
            assert_eq!((w[0].s_next, w[0].a_next), (w[1].s, w[1].a));
        }
    }

    #[test]
    fn file_roundtrip_and_rejection() {
        let mdp = MdpGenerator::new(3, 2, 0.9).generate(&mut seeded_rng(4, 0)).unwrap();
        let back = FiniteMdp::from_json(&mdp.to_json()).unwrap();
        assert_eq!(back, mdp);

        let mut file = mdp.to_file();
        file.transition[0][0][0] += 0.1;
        let text = serde_json::to_string(&file).unwrap();
        assert!(matches!(FiniteMdp::from_json(&text), Err(MdpError::Invalid(_))));
    }
}
