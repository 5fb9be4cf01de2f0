//! Identity and inequality checks on exact finite-MDP quantities.

use crate::energy::{expected_kl, kl, policy_gap_sq};
use crate::mdp::{dot, exact_q, v_from_q, FiniteMdp, PolicyTable, StateActionDistribution};
use crate::oracle::{OracleError, OracleSolution};
use crate::ppo::IterationRecord;
use crate::table::SaTable;

use super::CheckResult;

/// Tolerance for closed-form identities and inequalities.
pub const EXACT_TOL: f64 = 1e-10;
/// Tolerance for one-point monotonicity.
pub const MONOTONICITY_TOL: f64 = 1e-12;

/// `E_{ν*}[⟨Q(s,·), π(·|s) - π*(·|s)⟩]`.
pub fn monotonicity_value(q: &SaTable, pi: &PolicyTable, oracle: &OracleSolution) -> f64 {
    let nu = oracle.nu_star.weights();
    (0..q.n_states())
        .map(|s| {
            let diff: Vec<f64> = pi.row(s).iter().zip(oracle.pi_star.row(s)).map(|(a, b)| a - b).collect();
            nu[s] * dot(q.row(s), &diff)
        })
        .sum()
}

/// `L(π) - L(π*) = (1-γ)⁻¹ E_{ν*}[⟨Q^π, π - π*⟩]`.
pub fn check_performance_difference(
    mdp: &FiniteMdp,
    pi: &PolicyTable,
    oracle: &OracleSolution,
) -> Result<CheckResult, OracleError> {
    let q = exact_q(mdp, pi)?;
    check_performance_difference_with(mdp, pi, &q, oracle)
}

/// As [`check_performance_difference`] with the right-hand side built from a
/// supplied `Q` table; the left-hand side always uses the exact value.
pub fn check_performance_difference_with(
    mdp: &FiniteMdp,
    pi: &PolicyTable,
    q: &SaTable,
    oracle: &OracleSolution,
) -> Result<CheckResult, OracleError> {
    let exact = exact_q(mdp, pi)?;
    let lhs = oracle.objective(&v_from_q(&exact, pi)) - oracle.l_star;
    let rhs = monotonicity_value(q, pi, oracle) / (1.0 - mdp.gamma());
    Ok(CheckResult::identity("performance_difference", lhs, rhs, EXACT_TOL))
}

/// `E_{ν*}[⟨Q^π, π - π*⟩] ≤ 0`.
pub fn check_one_point_monotonicity(
    mdp: &FiniteMdp,
    pi: &PolicyTable,
    oracle: &OracleSolution,
) -> Result<CheckResult, OracleError> {
    let q = exact_q(mdp, pi)?;
    Ok(CheckResult::inequality("one_point_monotonicity", monotonicity_value(&q, pi, oracle), 0.0, MONOTONICITY_TOL))
}

/// Exact quantities of one PPO iteration `k → k+1`.
#[derive(Debug, Clone)]
pub struct IterationData {
    pub n_actions: usize,
    pub nu_star: Vec<f64>,
    pub pi_star: PolicyTable,
    /// `π_{θ_k}`.
    pub pi_k: PolicyTable,
    /// `π_{θ_{k+1}}`.
    pub pi_next: PolicyTable,
    /// `π_{k+1}`, the ideal update from the exact `Q^{π_{θ_k}}`.
    pub pi_ideal: PolicyTable,
    /// `π̂_{k+1}`, the ideal update from the learned critic.
    pub pi_hat: PolicyTable,
    pub log_pi_k: SaTable,
    pub log_pi_next: SaTable,
    pub log_pi_ideal: SaTable,
    /// `Q^{π_{θ_k}}`.
    pub q_exact: SaTable,
    /// `τ_k⁻¹ f_{θ_k}`.
    pub logits_k: SaTable,
    /// `τ_{k+1}⁻¹ f_{θ_{k+1}}`.
    pub logits_next: SaTable,
    pub tau_next: f64,
    pub beta_k: f64,
    /// Actor mean-squared error `ε_{k+1}` under `σ̃_k`.
    pub eps_pi_mse: f64,
    /// Critic mean-squared error `ε'_k` under `σ_k`.
    pub eps_q_mse: f64,
    pub phi_k: f64,
    pub phi_next: f64,
    pub psi_k: f64,
    pub m_const: f64,
    /// `σ̃_k`.
    pub sigma_aux: StateActionDistribution,
}

impl IterationData {
    /// `ε_k = τ_{k+1}⁻¹ ε_{k+1} φ + β_k⁻¹ ε'_k ψ*_k` with RMS errors.
    pub fn error_bound(&self, phi: f64) -> f64 {
        self.eps_pi_mse.sqrt() * phi / self.tau_next + self.eps_q_mse.sqrt() * self.psi_k / self.beta_k
    }

    /// `|A| τ_{k+1}⁻² ε_{k+1}²` with RMS `ε_{k+1}`.
    pub fn energy_error(&self) -> f64 {
        self.n_actions as f64 * self.eps_pi_mse / (self.tau_next * self.tau_next)
    }

    fn n_states(&self) -> usize {
        self.nu_star.len()
    }

    /// `E_{ν*}[KL(π* ‖ π_{θ_k})]`.
    pub fn kl_star(&self) -> f64 {
        expected_kl(&self.nu_star, &self.pi_star, &self.pi_k)
    }
}

/// `|E_{ν*}[⟨log(π_{θ_{k+1}}/π_{k+1}), π* - π_{θ_k}⟩]| ≤ ε_k`, with `φ*` taken at `phi`.
pub fn check_error_propagation(data: &IterationData, phi: f64) -> CheckResult {
    let mut lhs = 0.0;
    for s in 0..data.n_states() {
        let log_ratio: Vec<f64> =
            data.log_pi_next.row(s).iter().zip(data.log_pi_ideal.row(s)).map(|(a, b)| a - b).collect();
        let diff: Vec<f64> = data.pi_star.row(s).iter().zip(data.pi_k.row(s)).map(|(a, b)| a - b).collect();
        lhs += data.nu_star[s] * dot(&log_ratio, &diff);
    }
    CheckResult::inequality("error_propagation", lhs.abs(), data.error_bound(phi), EXACT_TOL)
}

/// `E_{ν*}[‖τ_{k+1}⁻¹f_{θ_{k+1}} - τ_k⁻¹f_{θ_k}‖²_∞] ≤ 2|A|τ_{k+1}⁻²ε²_{k+1} + 2β_k⁻²M`.
pub fn check_stepwise_energy(data: &IterationData) -> CheckResult {
    let mut lhs = 0.0;
    for s in 0..data.n_states() {
        let sup = data
            .logits_next
            .row(s)
            .iter()
            .zip(data.logits_k.row(s))
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        lhs += data.nu_star[s] * sup * sup;
    }
    let rhs = 2.0 * data.energy_error() + 2.0 * data.m_const / (data.beta_k * data.beta_k);
    CheckResult::inequality("stepwise_energy", lhs, rhs, EXACT_TOL)
}

/// Per-state right-hand side minus left-hand side of the one-step descent inequality.
pub fn one_step_descent_slacks(data: &IterationData) -> Vec<f64> {
    (0..data.n_states())
        .map(|s| {
            let star = data.pi_star.row(s);
            let (pk, pn) = (data.pi_k.row(s), data.pi_next.row(s));
            let lhs = kl(star, pn) - kl(star, pk);
            let log_ratio: Vec<f64> =
                data.log_pi_next.row(s).iter().zip(data.log_pi_ideal.row(s)).map(|(a, b)| a - b).collect();
            let k_minus_star: Vec<f64> = pk.iter().zip(star).map(|(a, b)| a - b).collect();
            let star_minus_k: Vec<f64> = k_minus_star.iter().map(|x| -x).collect();
            let l1: f64 = pn.iter().zip(pk).map(|(a, b)| (a - b).abs()).sum();
            let dlogit: Vec<f64> =
                data.logits_next.row(s).iter().zip(data.logits_k.row(s)).map(|(a, b)| a - b).collect();
            let k_minus_next: Vec<f64> = pk.iter().zip(pn).map(|(a, b)| a - b).collect();
            let rhs = dot(&log_ratio, &k_minus_star) - dot(data.q_exact.row(s), &star_minus_k) / data.beta_k
                - 0.5 * l1 * l1
                - dot(&dlogit, &k_minus_next);
            rhs - lhs
        })
        .collect()
}

/// Per-state one-step descent; reports the minimum slack over states.
pub fn check_one_step_descent(data: &IterationData) -> CheckResult {
    let slacks = one_step_descent_slacks(data);
    let (s, min) = slacks
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bs, bm), (s, v)| if *v < bm || v.is_nan() { (s, *v) } else { (bs, bm) });
    let star = data.pi_star.row(s);
    let lhs = kl(star, data.pi_next.row(s)) - kl(star, data.pi_k.row(s));
    CheckResult::inequality("one_step_descent", lhs, lhs + min, EXACT_TOL)
}

/// `E_{σ̃_k}[(π_{θ_{k+1}} - π̂_{k+1})²] ≤ τ_{k+1}⁻² ε_{k+1}/16`.
pub fn check_policy_gap(data: &IterationData) -> CheckResult {
    let lhs = policy_gap_sq(&data.pi_next, &data.pi_hat, &data.sigma_aux);
    let rhs = data.eps_pi_mse / (16.0 * data.tau_next * data.tau_next);
    CheckResult::inequality("policy_gap", lhs, rhs, EXACT_TOL)
}

/// All per-iteration inequalities, error propagation evaluated with `φ*_k`.
pub fn iteration_checks(data: &IterationData) -> Vec<CheckResult> {
    vec![
        check_one_step_descent(data),
        check_error_propagation(data, data.phi_k),
        check_stepwise_energy(data),
        check_policy_gap(data),
    ]
}

/// Worst case over a run of every per-iteration check, plus gap nonnegativity,
/// monotonicity and the performance-difference identity at each iterate.
pub fn run_checks(records: &[IterationRecord]) -> Vec<CheckResult> {
    let worst = |f: &dyn Fn(&IterationRecord) -> f64| {
        records.iter().map(|r| (r.k, f(r))).fold((0, f64::INFINITY), |(bk, bv), (k, v)| {
            if !bv.is_nan() && (v.is_nan() || v < bv) {
                (k, v)
            } else {
                (bk, bv)
            }
        })
    };
    let slack = |name: &str, f: &dyn Fn(&IterationRecord) -> f64, tol: f64| {
        let (k, v) = worst(f);
        CheckResult::inequality(format!("{name} (worst k={k})"), 0.0, v, tol)
    };
    let (k_pd, pd) = worst(&|r| -r.perf_diff_residual.abs());
    vec![
        slack("one_step_descent", &|r| r.slack_l52_min, EXACT_TOL),
        slack("error_propagation", &|r| r.slack_l46, EXACT_TOL),
        slack("stepwise_energy", &|r| r.slack_l47, EXACT_TOL),
        slack("policy_gap", &|r| r.slack_b1, EXACT_TOL),
        slack("gap_nonnegative", &|r| r.gap, EXACT_TOL),
        slack("one_point_monotonicity", &|r| -r.monotonicity, MONOTONICITY_TOL),
        CheckResult::identity(format!("performance_difference (worst k={k_pd})"), -pd, 0.0, EXACT_TOL),
    ]
}

/// Performance difference and monotonicity over `n` random full-support
/// policies plus `π*`, reported as the worst case of each.
pub fn identity_suite<R: rand::Rng + ?Sized>(
    mdp: &FiniteMdp,
    oracle: &OracleSolution,
    n: usize,
    rng: &mut R,
) -> Result<Vec<CheckResult>, OracleError> {
    let mut worst_pd: Option<CheckResult> = None;
    let mut worst_mono: Option<CheckResult> = None;
    let mut policies = vec![oracle.pi_star.clone()];
    policies.extend((0..n).map(|_| PolicyTable::random(mdp.n_states(), mdp.n_actions(), rng)));
    for pi in &policies {
        let pd = check_performance_difference(mdp, pi, oracle)?;
        if worst_pd.as_ref().is_none_or(|w| !(pd.value.abs() <= w.value.abs())) {
            worst_pd = Some(pd);
        }
        let mono = check_one_point_monotonicity(mdp, pi, oracle)?;
        if worst_mono.as_ref().is_none_or(|w| !(mono.value >= w.value)) {
            worst_mono = Some(mono);
        }
    }
    Ok(vec![worst_pd.expect("nonempty"), worst_mono.expect("nonempty")])
}
