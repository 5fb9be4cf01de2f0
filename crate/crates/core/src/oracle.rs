//! Ground truth on finite MDPs: the optimal policy and everything derived from it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{ideal_update, EnergyError, EnergyPolicy};
use crate::mdp::{
    dot, exact_q, state_action_from, stationary_state_distribution, v_from_q, FiniteMdp, MdpError, PolicyEvaluation,
    PolicyTable, StateActionDistribution, StateDistribution,
};
use crate::table::SaTable;

/// Value-iteration stopping tolerance (sup-norm change).
pub const VI_TOL: f64 = 1e-12;
const VI_MAX_ITERS: usize = 10_000_000;
/// Actions whose optimal values are this close count as tied.
const TIE_TOL: f64 = 1e-11;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("distribution has no mass at state {s}, action {a}")]
    ZeroMass { s: usize, a: usize },
    #[error("value iteration did not converge")]
    NoConvergence,
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub pi_star: PolicyTable,
    /// Greedy action per state.
    pub actions: Vec<usize>,
    pub v_star: Vec<f64>,
    pub q_star: SaTable,
    pub nu_star: StateDistribution,
    pub sigma_star: StateActionDistribution,
    pub l_star: f64,
}

/// Value iteration on the normalized Bellman optimality operator, then exact
/// evaluation of the greedy policy (ties go to the lowest action index).
pub fn solve_optimal(mdp: &FiniteMdp) -> Result<OracleSolution, OracleError> {
    let (ns, na, gamma) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let backup = |v: &[f64], s: usize, a: usize| (1.0 - gamma) * mdp.reward(s, a) + gamma * dot(mdp.transition_row(s, a), v);
    let mut v = vec![0.0; ns];
    let mut converged = false;
    for _ in 0..VI_MAX_ITERS {
        let next: Vec<f64> =
            (0..ns).map(|s| (0..na).map(|a| backup(&v, s, a)).fold(f64::NEG_INFINITY, f64::max)).collect();
        let change = v.iter().zip(&next).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        v = next;
        if change <= VI_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(OracleError::NoConvergence);
    }
    let actions: Vec<usize> = (0..ns)
        .map(|s| {
            let q: Vec<f64> = (0..na).map(|a| backup(&v, s, a)).collect();
            let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            q.iter().position(|x| *x >= best - TIE_TOL).expect("nonempty action set")
        })
        .collect();
    let pi_star = PolicyTable::deterministic(na, &actions);
    let q_star = exact_q(mdp, &pi_star)?;
    let v_star = v_from_q(&q_star, &pi_star);
    let nu_star = stationary_state_distribution(mdp, &pi_star)?;
    let sigma_star = state_action_from(&nu_star, &pi_star);
    let l_star = dot(nu_star.weights(), &v_star);
    Ok(OracleSolution { pi_star, actions, v_star, q_star, nu_star, sigma_star, l_star })
}

impl OracleSolution {
    /// `L(π) = E_{ν*}[V^π(s)]`.
    pub fn objective(&self, v: &[f64]) -> f64 {
        dot(self.nu_star.weights(), v)
    }

    /// `L(π*) - L(π)` given `V^π`.
    pub fn gap_from_v(&self, v: &[f64]) -> f64 {
        self.l_star - self.objective(v)
    }

    /// `max_s |V*(s) - max_a Q*(s, a)|`.
    pub fn optimality_residual(&self) -> f64 {
        (0..self.v_star.len())
            .map(|s| {
                let best = self.q_star.row(s).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (self.v_star[s] - best).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn dump(&self) -> OracleDump {
        OracleDump {
            pi_star: self.pi_star.table().rows(),
            v_star: self.v_star.clone(),
            nu_star: self.nu_star.weights().to_vec(),
            l_star: self.l_star,
        }
    }
}

/// `L(π*) - L(π)`.
pub fn optimality_gap(mdp: &FiniteMdp, pi: &PolicyTable, oracle: &OracleSolution) -> Result<f64, OracleError> {
    let q = exact_q(mdp, pi)?;
    Ok(oracle.gap_from_v(&v_from_q(&q, pi)))
}

/// `(φ*, ψ*)`: RMS deviation of `dπ*/dπ_0` from `dπ_k/dπ_0` under `σ̃_k`, and
/// of `dσ*/dσ_k` from `dν*/dν_k` under `σ_k`.
pub fn density_ratio_coeffs(
    mdp: &FiniteMdp,
    pi_k: &PolicyTable,
    oracle: &OracleSolution,
) -> Result<(f64, f64), OracleError> {
    let nu_k = stationary_state_distribution(mdp, pi_k)?;
    density_ratio_coeffs_with(pi_k, &nu_k, oracle)
}

/// As [`density_ratio_coeffs`] with `ν_k` supplied.
pub fn density_ratio_coeffs_with(
    pi_k: &PolicyTable,
    nu_k: &StateDistribution,
    oracle: &OracleSolution,
) -> Result<(f64, f64), OracleError> {
    let (ns, na) = (pi_k.n_states(), pi_k.n_actions());
    let nf = na as f64;
    let mut phi_sq = 0.0;
    let mut psi_sq = 0.0;
    for s in 0..ns {
        let nu = nu_k.get(s);
        let state_ratio = if nu > 0.0 { oracle.nu_star.get(s) / nu } else { 0.0 };
        for a in 0..na {
            let d = nf * (oracle.pi_star.prob(s, a) - pi_k.prob(s, a));
            phi_sq += nu / nf * d * d;
            let sigma = nu * pi_k.prob(s, a);
            if sigma <= 0.0 {
                if oracle.sigma_star.weight(s, a) > 0.0 {
                    return Err(OracleError::ZeroMass { s, a });
                }
                continue;
            }
            let r = oracle.sigma_star.weight(s, a) / sigma - state_ratio;
            psi_sq += sigma * r * r;
        }
    }
    Ok((phi_sq.sqrt(), psi_sq.sqrt()))
}

/// The KL-regularized improvement of `ep_k` computed from its exact `Q`.
pub fn ideal_policy_from_exact_q(mdp: &FiniteMdp, ep_k: &EnergyPolicy, beta_k: f64) -> Result<EnergyPolicy, OracleError> {
    let pi_k = ep_k.to_policy_table(mdp)?;
    let q = exact_q(mdp, &pi_k)?;
    Ok(ideal_update(ep_k, mdp, &q, beta_k)?)
}

/// Evaluates `pi` and its gap in one go.
pub fn evaluate(mdp: &FiniteMdp, pi: &PolicyTable, oracle: &OracleSolution) -> Result<(PolicyEvaluation, f64), OracleError> {
    let eval = PolicyEvaluation::new(mdp, pi)?;
    let gap = oracle.gap_from_v(&eval.v);
    Ok((eval, gap))
}

/// Serializable summary of an [`OracleSolution`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleDump {
    pub pi_star: Vec<Vec<f64>>,
    pub v_star: Vec<f64>,
    pub nu_star: Vec<f64>,
    pub l_star: f64,
}
