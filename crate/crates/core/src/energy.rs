//! Energy-based policies `π(a|s) ∝ exp(f(s, a)/τ)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{FiniteMdp, MdpError, PolicyTable, StateActionDistribution};
use crate::net::TwoLayerNet;
use crate::table::SaTable;

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("energy is not finite at state {s}, action {a}")]
    NonFinite { s: usize, a: usize },
    #[error("energy table is {got:?}, mdp is {expected:?}")]
    Shape { expected: (usize, usize), got: (usize, usize) },
    #[error("network input dimension {net} does not match feature dimension {mdp}")]
    FeatureDim { net: usize, mdp: usize },
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// An energy `f: S × A → R`.
#[derive(Debug, Clone, PartialEq)]
pub enum EnergyFn {
    /// `f ≡ 0`.
    Zero,
    /// `f_θ = u_θ - u_{θ(0)}`, which vanishes at initialization.
    Residual(TwoLayerNet),
    /// Explicit values.
    Table(SaTable),
}

impl EnergyFn {
    /// Evaluates the energy on every state-action pair.
    pub fn table(&self, mdp: &FiniteMdp) -> Result<SaTable, EnergyError> {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let t = match self {
            EnergyFn::Zero => SaTable::zeros(ns, na),
            EnergyFn::Residual(net) => {
                if net.d() != mdp.d() {
                    return Err(EnergyError::FeatureDim { net: net.d(), mdp: mdp.d() });
                }
                let at_init = TwoLayerNet::new(net.init_ref().clone(), net.radius()).expect("radius already validated");
                SaTable::from_fn(ns, na, |s, a| {
                    let x = mdp.feature(s, a);
                    net.forward_unchecked(x) - at_init.forward_unchecked(x)
                })
            }
            EnergyFn::Table(t) => {
                if (t.n_states(), t.n_actions()) != (ns, na) {
                    return Err(EnergyError::Shape { expected: (ns, na), got: (t.n_states(), t.n_actions()) });
                }
                t.clone()
            }
        };
        for s in 0..ns {
            for a in 0..na {
                if !t.get(s, a).is_finite() {
                    return Err(EnergyError::NonFinite { s, a });
                }
            }
        }
        Ok(t)
    }
}

/// An energy paired with a temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyPolicy {
    pub energy: EnergyFn,
    pub tau: f64,
}

impl EnergyPolicy {
    pub fn new(energy: EnergyFn, tau: f64) -> Result<Self, EnergyError> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(EnergyError::Temperature(tau));
        }
        Ok(Self { energy, tau })
    }

    /// The uniform policy `π_0` (zero energy, unit temperature).
    pub fn uniform() -> Self {
        Self { energy: EnergyFn::Zero, tau: 1.0 }
    }

    /// `f/τ` on every pair.
    pub fn logits(&self, mdp: &FiniteMdp) -> Result<SaTable, EnergyError> {
        let tau = self.tau;
        Ok(self.energy.table(mdp)?.map(|f| f / tau))
    }

    /// `log π(a|s)`, normalized with log-sum-exp.
    pub fn log_policy_table(&self, mdp: &FiniteMdp) -> Result<SaTable, EnergyError> {
        Ok(log_softmax_rows(&self.logits(mdp)?))
    }

    pub fn to_policy_table(&self, mdp: &FiniteMdp) -> Result<PolicyTable, EnergyError> {
        Ok(softmax_policy(&self.logits(mdp)?)?)
    }
}

/// Row-wise `x - logsumexp(x)`.
pub fn log_softmax_rows(logits: &SaTable) -> SaTable {
    let mut out = logits.clone();
    for s in 0..logits.n_states() {
        let row = logits.row(s);
        let lse = log_sum_exp(row);
        for (a, x) in row.iter().enumerate() {
            out.set(s, a, x - lse);
        }
    }
    out
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// The policy whose log-probabilities are the row-normalized `logits`.
pub fn softmax_policy(logits: &SaTable) -> Result<PolicyTable, MdpError> {
    let mut probs = log_softmax_rows(logits).map(f64::exp);
    // absorb the last ulps of normalization error
    for s in 0..probs.n_states() {
        let sum: f64 = probs.row(s).iter().sum();
        for a in 0..probs.n_actions() {
            probs.set(s, a, probs.get(s, a) / sum);
        }
    }
    PolicyTable::new(probs)
}

/// `KL(p ‖ q) = Σ p log(p/q)`; `+∞` if `q` misses mass that `p` has.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        if *pi > 0.0 {
            if *qi <= 0.0 {
                return f64::INFINITY;
            }
            total += pi * (pi / qi).ln();
        }
    }
    total.max(0.0)
}

/// `E_{s∼ν}[KL(p(·|s) ‖ q(·|s))]`.
pub fn expected_kl(nu: &[f64], p: &PolicyTable, q: &PolicyTable) -> f64 {
    nu.iter().enumerate().filter(|(_, w)| **w > 0.0).map(|(s, w)| w * kl(p.row(s), q.row(s))).sum()
}

/// Closed-form maximizer of `⟨Q(s,·), π⟩ - β_k KL(π ‖ π_k)`: the policy with
/// energy `Q/β_k + f_k/τ_k` at unit temperature.
pub fn ideal_update(ep_k: &EnergyPolicy, mdp: &FiniteMdp, q: &SaTable, beta_k: f64) -> Result<EnergyPolicy, EnergyError> {
    if !(beta_k > 0.0) {
        return Err(EnergyError::Temperature(beta_k));
    }
    let logits = ep_k.logits(mdp)?;
    if (q.n_states(), q.n_actions()) != (logits.n_states(), logits.n_actions()) {
        return Err(EnergyError::Shape {
            expected: (logits.n_states(), logits.n_actions()),
            got: (q.n_states(), q.n_actions()),
        });
    }
    EnergyPolicy::new(EnergyFn::Table(q.axpby(1.0 / beta_k, &logits, 1.0)), 1.0)
}

/// `E_{(s,a)∼dist}[(π_a(a|s) - π_b(a|s))²]`.
pub fn policy_gap_sq(a: &PolicyTable, b: &PolicyTable, dist: &StateActionDistribution) -> f64 {
    dist.expect(|s, act| {
        let d = a.prob(s, act) - b.prob(s, act);
        d * d
    })
}

/// Energy values kept for diagnostics output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyDump {
    pub tau: f64,
    pub energy: SaTable,
}

impl EnergyDump {
    pub fn new(ep: &EnergyPolicy, mdp: &FiniteMdp) -> Result<Self, EnergyError> {
        Ok(Self { tau: ep.tau, energy: ep.energy.table(mdp)? })
    }
}
