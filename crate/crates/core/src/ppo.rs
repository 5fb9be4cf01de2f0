//! The neural PPO outer loop.
//!
//! Iteration `k` draws `T` tuples from `σ_k`, fits the critic by TD, fits the
//! actor energy by SGD toward `τ_{k+1}(β_k⁻¹Q_ω + τ_k⁻¹f_{θ_k})`, and sets
//! `π_{θ_{k+1}} ∝ exp(f_{θ_{k+1}}/τ_{k+1})`. Actor and critic share one
//! initialization; the actor energy is the residual `u_θ - u_{θ(0)}` so that
//! `π_{θ_0}` is exactly uniform.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{log_softmax_rows, softmax_policy};
use crate::harness::checks::{
    check_error_propagation, check_one_step_descent, check_policy_gap, check_stepwise_energy, monotonicity_value,
    IterationData,
};
use crate::learner::{self, weighted_mse, LearnerError, PairContext};
use crate::mdp::{MdpError, PolicyEvaluation, PolicyTable, SamplingMode, TupleSampler};
use crate::mdp::FiniteMdp;
use crate::net::{NetError, NetInit};
use crate::oracle::{density_ratio_coeffs_with, solve_optimal, OracleError, OracleSolution};
use crate::seeded_rng;
use crate::table::SaTable;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// A failed run together with the records completed before the failure.
#[derive(Debug, Error)]
#[error("run aborted after {} iterations: {source}", completed.len())]
pub struct RunFailure {
    pub completed: Vec<IterationRecord>,
    #[source]
    pub source: PpoError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub beta: f64,
    /// Outer iterations `K`.
    pub k_iters: usize,
    /// SGD iterations per actor update.
    pub t_f: usize,
    /// TD iterations per critic update.
    pub t_q: usize,
    /// Shared width `m_f = m_Q`.
    pub m: usize,
    pub r_f: f64,
    pub r_q: f64,
    pub seed: u64,
    /// Replaces the stepsize `T^{-1/2}` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_override: Option<f64>,
    #[serde(default)]
    pub sampling: SamplingMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            k_iters: 50,
            t_f: 2000,
            t_q: 2000,
            m: 512,
            r_f: 10.0,
            r_q: 10.0,
            seed: 0,
            eta_override: None,
            sampling: SamplingMode::Stationary,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |msg: &str| Err(PpoError::Config(msg.into()));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if self.k_iters == 0 || self.t_f == 0 || self.t_q == 0 || self.m == 0 {
            return bad("K, T and m must be positive");
        }
        if !(self.r_q > 0.0) || !(self.r_f >= self.r_q) {
            return bad("radii must satisfy R_f >= R_Q > 0");
        }
        if let Some(eta) = self.eta_override {
            if !(eta > 0.0) {
                return bad("eta override must be positive");
            }
        }
        Ok(())
    }
}

/// `(τ_{k+1}, β_k) = (β√K/(k+1), β√K)`.
pub fn schedules(beta: f64, k_iters: usize, k: usize) -> (f64, f64) {
    let beta_k = beta * (k_iters as f64).sqrt();
    (beta_k / (k + 1) as f64, beta_k)
}

/// Diagnostics of iteration `k`; all expectations are exact finite sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    /// `τ_{k+1}`.
    pub tau: f64,
    pub beta_k: f64,
    /// `L(π*) - L(π_{θ_k})`.
    pub gap: f64,
    /// `E_{ν*}[KL(π* ‖ π_{θ_k})]`.
    pub kl_star: f64,
    /// Actor mean-squared error `ε_{k+1}`.
    pub eps_pi: f64,
    /// Critic mean-squared error `ε'_k`.
    pub eps_q: f64,
    pub eps_pi_rms: f64,
    pub eps_q_rms: f64,
    /// `|A|τ_{k+1}⁻²ε²_{k+1}` with RMS `ε_{k+1}`.
    pub eps_energy: f64,
    pub phi_star: f64,
    pub phi_star_next: f64,
    pub psi_star: f64,
    pub slack_l46: f64,
    /// Error-propagation slack with `φ*_{k+1}` in the bound.
    pub slack_l46_next: f64,
    pub slack_l47: f64,
    pub slack_l52_min: f64,
    pub slack_b1: f64,
    /// `E_{ν*}[⟨Q^{π_{θ_k}}, π_{θ_k} - π*⟩]`.
    pub monotonicity: f64,
    /// Residual of the performance-difference identity at `π_{θ_k}`.
    pub perf_diff_residual: f64,
    #[serde(rename = "M")]
    pub m_const: f64,
}

impl IterationRecord {
    pub const CSV_HEADER: &'static str = "k,tau,beta_k,gap,kl_star,eps_pi,eps_q,phi_star,psi_star,slack_l46,slack_l47,slack_l52_min,slack_b1,monotonicity,M";

    pub fn csv_row(&self) -> String {
        let f = |x: f64| format_float(x);
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.k,
            f(self.tau),
            f(self.beta_k),
            f(self.gap),
            f(self.kl_star),
            f(self.eps_pi),
            f(self.eps_q),
            f(self.phi_star),
            f(self.psi_star),
            f(self.slack_l46),
            f(self.slack_l47),
            f(self.slack_l52_min),
            f(self.slack_b1),
            f(self.monotonicity),
            f(self.m_const)
        )
    }
}

/// 17 significant digits in scientific notation, `.` decimal separator.
pub fn format_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub fn records_to_csv(records: &[IterationRecord]) -> String {
    let mut out = String::from(IterationRecord::CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Parses a CSV produced by [`records_to_csv`] back into its column values.
pub fn parse_csv(text: &str) -> Result<Vec<Vec<f64>>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(IterationRecord::CSV_HEADER) {
        return Err("unexpected header".into());
    }
    lines
        .map(|line| {
            line.split(',')
                .map(|v| v.parse::<f64>().map_err(|e| format!("{v}: {e}")))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<IterationRecord>,
    /// `L(π*) - L(π_{θ_K})`.
    pub final_gap: f64,
    pub final_kl: f64,
    /// `min_{0≤k≤K}` of the gap.
    pub min_gap: f64,
    pub final_policy: PolicyTable,
}

/// Runs neural PPO, solving for the optimum first.
pub fn run(mdp: &FiniteMdp, config: &RunConfig) -> Result<RunOutput, RunFailure> {
    let oracle = solve_optimal(mdp).map_err(|e| RunFailure { completed: vec![], source: e.into() })?;
    run_with_oracle(mdp, &oracle, config)
}

pub fn run_with_oracle(mdp: &FiniteMdp, oracle: &OracleSolution, config: &RunConfig) -> Result<RunOutput, RunFailure> {
    let mut records = Vec::with_capacity(config.k_iters);
    match run_inner(mdp, oracle, config, &mut records) {
        Ok((final_gap, final_kl, final_policy)) => {
            let min_gap = records.iter().map(|r| r.gap).fold(final_gap, f64::min);
            Ok(RunOutput { records, final_gap, final_kl, min_gap, final_policy })
        }
        Err(source) => Err(RunFailure { completed: records, source }),
    }
}

fn run_inner(
    mdp: &FiniteMdp,
    oracle: &OracleSolution,
    config: &RunConfig,
    records: &mut Vec<IterationRecord>,
) -> Result<(f64, f64, PolicyTable), PpoError> {
    config.validate()?;
    mdp.ensure_valid()?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let init = Arc::new(NetInit::from_seed(config.m, mdp.d(), config.seed)?);
    let ctx = Arc::new(PairContext::for_mdp(init, mdp)?);
    let mut rng = seeded_rng(config.seed, 1);
    let nu_star = oracle.nu_star.weights();
    let inv_1g = 1.0 / (1.0 - mdp.gamma());

    // M = 2 E_{ν*}[max_a Q_{ω_0}(s,a)²] + 2 R_f²
    let u0 = ctx.u0();
    let m_const = 2.0
        * (0..ns).map(|s| nu_star[s] * (0..na).map(|a| u0[mdp.pair(s, a)].powi(2)).fold(0.0, f64::max)).sum::<f64>()
        + 2.0 * config.r_f * config.r_f;

    let mut tau_k = 1.0;
    let mut f_k = vec![0.0; mdp.n_pairs()];
    let mut logits_k = SaTable::zeros(ns, na);
    let mut pi_k = PolicyTable::uniform(ns, na);
    let mut eval_k = PolicyEvaluation::new(mdp, &pi_k)?;
    let t_batch = config.t_f.max(config.t_q);

    for k in 0..config.k_iters {
        let (tau_next, beta_k) = schedules(config.beta, config.k_iters, k);
        let gap = oracle.gap_from_v(&eval_k.v);
        let mono = monotonicity_value(&eval_k.q, &pi_k, oracle);
        let perf_diff_residual = -gap - inv_1g * mono;

        let sampler = TupleSampler::new(mdp, &pi_k, &eval_k.sigma)?;
        let batch = match config.sampling {
            SamplingMode::Stationary => sampler.sample_batch(t_batch, &mut rng),
            SamplingMode::Rollout { burn_in } => sampler.rollout(t_batch, burn_in, &mut rng),
        };

        let critic = learner::td_policy_evaluation(
            ctx.clone(),
            mdp,
            &pi_k,
            config.r_q,
            eval_k.sigma.weights().to_vec(),
            &batch[..config.t_q],
            config.eta_override,
        )?;
        let q_w = ctx.eval(&critic.averaged);
        let eps_q = weighted_mse(eval_k.sigma.weights(), &q_w, eval_k.q.as_slice());

        let actor = learner::sgd_policy_improvement(
            ctx.clone(),
            mdp,
            &q_w,
            &f_k,
            tau_next,
            tau_k,
            beta_k,
            config.r_f,
            eval_k.sigma_aux.weights().to_vec(),
            &batch[..config.t_f],
            config.eta_override,
        )?;
        let f_next = ctx.eval_residual(&actor.averaged);
        let target = learner::energy_target(&q_w, &f_k, tau_next, tau_k, beta_k);
        let eps_pi = weighted_mse(eval_k.sigma_aux.weights(), &f_next, &target);

        let logits_next = SaTable::from_flat(ns, na, f_next.iter().map(|f| f / tau_next).collect());
        let pi_next = softmax_policy(&logits_next)?;
        let hat_logits = SaTable::from_flat(ns, na, target.iter().map(|v| v / tau_next).collect());
        let ideal_logits = eval_k.q.axpby(1.0 / beta_k, &logits_k, 1.0);
        let eval_next = PolicyEvaluation::new(mdp, &pi_next)?;

        let (phi_k, psi_k) = density_ratio_coeffs_with(&pi_k, &eval_k.nu, oracle)?;
        let (phi_next, _) = density_ratio_coeffs_with(&pi_next, &eval_next.nu, oracle)?;

        let data = IterationData {
            n_actions: na,
            nu_star: nu_star.to_vec(),
            pi_star: oracle.pi_star.clone(),
            pi_k: pi_k.clone(),
            pi_next: pi_next.clone(),
            pi_ideal: softmax_policy(&ideal_logits)?,
            pi_hat: softmax_policy(&hat_logits)?,
            log_pi_k: log_softmax_rows(&logits_k),
            log_pi_next: log_softmax_rows(&logits_next),
            log_pi_ideal: log_softmax_rows(&ideal_logits),
            q_exact: eval_k.q.clone(),
            logits_k: logits_k.clone(),
            logits_next: logits_next.clone(),
            tau_next,
            beta_k,
            eps_pi_mse: eps_pi,
            eps_q_mse: eps_q,
            phi_k,
            phi_next,
            psi_k,
            m_const,
            sigma_aux: eval_k.sigma_aux.clone(),
        };

        records.push(IterationRecord {
            k,
            tau: tau_next,
            beta_k,
            gap,
            kl_star: data.kl_star(),
            eps_pi,
            eps_q,
            eps_pi_rms: eps_pi.sqrt(),
            eps_q_rms: eps_q.sqrt(),
            eps_energy: data.energy_error(),
            phi_star: phi_k,
            phi_star_next: phi_next,
            psi_star: psi_k,
            slack_l46: check_error_propagation(&data, phi_k).value,
            slack_l46_next: check_error_propagation(&data, phi_next).value,
            slack_l47: check_stepwise_energy(&data).value,
            slack_l52_min: check_one_step_descent(&data).value,
            slack_b1: check_policy_gap(&data).value,
            monotonicity: mono,
            perf_diff_residual,
            m_const,
        });

        tau_k = tau_next;
        f_k = f_next;
        logits_k = logits_next;
        pi_k = pi_next;
        eval_k = eval_next;
    }
    let final_gap = oracle.gap_from_v(&eval_k.v);
    let final_kl = crate::energy::expected_kl(nu_star, &oracle.pi_star, &pi_k);
    Ok((final_gap, final_kl, pi_k))
}
