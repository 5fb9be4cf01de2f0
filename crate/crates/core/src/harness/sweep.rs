//! Parameter sweeps whose medians feed [`rate_fit`](super::rate::rate_fit).
//!
//! Every cell is seeded independently, so results do not depend on the
//! order (or the thread) in which cells run.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learner::{self, LearnerError, MetaProblem, PairContext, TupleDistribution};
use crate::mdp::{
    exact_q, stationary_state_action_distribution, FiniteMdp, MdpError, MdpGenerator, PolicyTable,
};
use crate::net::{linearization_gap, sample_unit_sphere, NetError, NetInit, TwoLayerNet};
use crate::oracle::{OracleError, OracleSolution};
use crate::ppo::{self, RunConfig, RunFailure};
use crate::seeded_rng;

use super::rate::{rate_fit, RateError, RateFit};
use super::CheckResult;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep: {0}")]
    Spec(String),
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Run(#[from] Box<RunFailure>),
}

/// The MDP the end-to-end experiments run on: 5 states, 3 actions, `γ = 0.9`.
pub fn reference_mdp() -> FiniteMdp {
    MdpGenerator::new(5, 3, 0.9).generate(&mut seeded_rng(7, 0)).expect("reference sizes are valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Outer PPO iterations.
    K,
    /// Inner learner iterations.
    T,
    /// Network width.
    M,
    /// Projection radius.
    R,
}

/// Grid, repetitions and slope threshold of one rate experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub threshold: f64,
}

impl SweepSpec {
    pub fn new(param: SweepParam, grid: Vec<f64>, base_seed: u64, threshold: f64) -> Self {
        Self { param, grid, seeds: (0..3).map(|i| base_seed + i).collect(), threshold }
    }

    /// At least 4 increasing positive points spanning a factor of 8 or more,
    /// and at least 3 seeds.
    pub fn validate(&self) -> Result<(), SweepError> {
        if self.grid.len() < 4 {
            return Err(SweepError::Spec(format!("grid has {} points, need 4", self.grid.len())));
        }
        if self.grid.windows(2).any(|w| !(w[0] > 0.0 && w[1] > w[0])) {
            return Err(SweepError::Spec("grid must be positive and increasing".into()));
        }
        if self.grid[self.grid.len() - 1] / self.grid[0] < 8.0 {
            return Err(SweepError::Spec("grid must span at least a factor of 8".into()));
        }
        if self.seeds.len() < 3 {
            return Err(SweepError::Spec("need at least 3 seeds".into()));
        }
        Ok(())
    }

    fn cells(&self) -> Vec<(usize, u64)> {
        (0..self.grid.len()).flat_map(|i| self.seeds.iter().map(move |s| (i, *s))).collect()
    }

    fn collect(&self, flat: Vec<f64>) -> Vec<Vec<f64>> {
        flat.chunks(self.seeds.len()).map(<[f64]>::to_vec).collect()
    }
}

/// Measurements of a sweep and the fitted slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub name: String,
    pub spec: SweepSpec,
    /// `values[i][j]`: grid point `i`, seed `j`.
    pub values: Vec<Vec<f64>>,
    pub fit: RateFit,
    pub check: CheckResult,
}

impl SweepReport {
    fn new(name: &str, spec: SweepSpec, values: Vec<Vec<f64>>) -> Result<Self, SweepError> {
        let fit = rate_fit(&spec.grid, &values)?;
        let check = fit.check(format!("{name}_slope"), spec.threshold);
        Ok(Self { name: name.into(), spec, values, fit, check })
    }
}

fn shared_context(mdp: &FiniteMdp, m: usize, seed: u64) -> Result<Arc<PairContext>, SweepError> {
    let init = Arc::new(NetInit::from_seed(m, mdp.d(), seed)?);
    Ok(Arc::new(PairContext::for_mdp(init, mdp)?))
}

/// Critic error `E_σ[(Q_ω̄ - Q^π)²]` of TD under the uniform policy, swept over `T`.
pub fn td_rate_sweep(mdp: &FiniteMdp, m: usize, radius: f64, spec: SweepSpec) -> Result<SweepReport, SweepError> {
    spec.validate()?;
    let pi = PolicyTable::uniform(mdp.n_states(), mdp.n_actions());
    let sigma = stationary_state_action_distribution(mdp, &pi)?;
    let q = exact_q(mdp, &pi)?;
    let flat = spec
        .cells()
        .into_par_iter()
        .map(|(i, seed)| -> Result<f64, SweepError> {
            let ctx = shared_context(mdp, m, seed)?;
            let t = spec.grid[i] as usize;
            let problem = learner::td_problem(ctx.clone(), mdp, &pi, radius, t, sigma.weights().to_vec())?;
            let samples = problem.sample(&mut seeded_rng(seed, 2))?;
            let out = learner::run(&problem, &samples, false)?;
            Ok(learner::weighted_mse(sigma.weights(), &ctx.eval(&out.averaged), q.as_slice()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let values = spec.collect(flat);
    SweepReport::new("td_error_vs_t", spec, values)
}

/// A target of the form `u⁰_{α(0)+Δ}` with `‖Δ‖ = scale` and `Δ` in the span
/// of the pair gradients, so the linearized class represents it exactly.
pub fn realizable_target<R: Rng + ?Sized>(ctx: &PairContext, scale: f64, rng: &mut R) -> Vec<f64> {
    let phi = ctx.linearized_jacobian();
    let c = nalgebra::DVector::from_iterator(ctx.n_pairs(), (0..ctx.n_pairs()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let mut delta = phi.transpose() * c;
    let norm = delta.norm();
    if norm > 0.0 {
        delta *= scale / norm;
    }
    let alpha: Vec<f64> = ctx.init().alpha0().iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
    ctx.eval_linearized(&alpha)
}

/// Regression error `E_σ[(u_ᾱ - v)²]` of SGD on a realizable target, swept over `T`.
pub fn sgd_rate_sweep(mdp: &FiniteMdp, m: usize, radius: f64, spec: SweepSpec) -> Result<SweepReport, SweepError> {
    spec.validate()?;
    let pi = PolicyTable::uniform(mdp.n_states(), mdp.n_actions());
    let sigma = stationary_state_action_distribution(mdp, &pi)?;
    let flat = spec
        .cells()
        .into_par_iter()
        .map(|(i, seed)| -> Result<f64, SweepError> {
            let ctx = shared_context(mdp, m, seed)?;
            let target = realizable_target(&ctx, 0.5 * radius, &mut seeded_rng(seed, 3));
            let t = spec.grid[i] as usize;
            let dist = TupleDistribution::pairs_only(sigma.weights().to_vec());
            let problem = MetaProblem::new(ctx.clone(), 0.0, target.clone(), radius, t, dist)?;
            let samples = problem.sample(&mut seeded_rng(seed, 2))?;
            let out = learner::run(&problem, &samples, false)?;
            Ok(learner::weighted_mse(sigma.weights(), &ctx.eval(&out.averaged), &target))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let values = spec.collect(flat);
    SweepReport::new("sgd_error_vs_t", spec, values)
}

/// Uniform draw from the ball of radius `r` in `R^n`.
fn sample_ball<R: Rng + ?Sized>(n: usize, r: f64, rng: &mut R) -> Vec<f64> {
    let dir = sample_unit_sphere(n, rng);
    let radius = r * rng.random::<f64>().powf(1.0 / n as f64);
    dir.into_iter().map(|x| radius * x).collect()
}

/// `E[(u_α - u⁰_α)²]` for random in-ball `α` and unit-sphere inputs, swept over `m`.
pub fn linearization_sweep(
    d: usize,
    radius: f64,
    n_nets: usize,
    n_inputs: usize,
    spec: SweepSpec,
) -> Result<SweepReport, SweepError> {
    spec.validate()?;
    let flat = spec
        .cells()
        .into_par_iter()
        .map(|(i, seed)| -> Result<f64, SweepError> {
            let m = spec.grid[i] as usize;
            let init = Arc::new(NetInit::from_seed(m, d, seed)?);
            let mut rng = seeded_rng(seed, 4);
            let nets = (0..n_nets)
                .map(|_| TwoLayerNet::with_delta(init.clone(), radius, &sample_ball(m * d, radius, &mut rng)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(linearization_gap(&nets, |r| sample_unit_sphere(d, r), n_inputs, &mut rng)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let values = spec.collect(flat);
    SweepReport::new("linearization_gap_vs_m", spec, values)
}

/// Update-vector variance at the last iterate of a regression run whose
/// constant target lies far outside the ball, swept over the radius.
pub fn variance_sweep(
    mdp: &FiniteMdp,
    m: usize,
    t: usize,
    n_probes: usize,
    spec: SweepSpec,
) -> Result<SweepReport, SweepError> {
    spec.validate()?;
    let pi = PolicyTable::uniform(mdp.n_states(), mdp.n_actions());
    let sigma = stationary_state_action_distribution(mdp, &pi)?;
    let far = 10.0 * spec.grid[spec.grid.len() - 1];
    let flat = spec
        .cells()
        .into_par_iter()
        .map(|(i, seed)| -> Result<f64, SweepError> {
            let ctx = shared_context(mdp, m, seed)?;
            let radius = spec.grid[i];
            let dist = TupleDistribution::pairs_only(sigma.weights().to_vec());
            let problem = MetaProblem::new(ctx, 0.0, vec![far; mdp.n_pairs()], radius, t, dist)?;
            let samples = problem.sample(&mut seeded_rng(seed, 2))?;
            let out = learner::run(&problem, &samples, false)?;
            Ok(learner::empirical_update_variance(&problem, &out.final_net, n_probes, &mut seeded_rng(seed, 5))?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let values = spec.collect(flat);
    SweepReport::new("update_variance_vs_r", spec, values)
}

/// End-to-end sweep over `K`: `values[i][j]` is `min_{0≤k≤K} gap` of seed `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalSweepReport {
    pub sweep: SweepReport,
    /// `L(π*) - L(π_0)`.
    pub initial_gap: f64,
    /// Median min-gap at the largest `K` over the initial gap.
    pub final_ratio: f64,
}

pub fn global_k_sweep(
    mdp: &FiniteMdp,
    oracle: &OracleSolution,
    base: &RunConfig,
    spec: SweepSpec,
) -> Result<GlobalSweepReport, SweepError> {
    spec.validate()?;
    let flat = spec
        .cells()
        .into_par_iter()
        .map(|(i, seed)| -> Result<(f64, f64), SweepError> {
            let cfg = RunConfig { k_iters: spec.grid[i] as usize, seed, ..base.clone() };
            let out = ppo::run_with_oracle(mdp, oracle, &cfg).map_err(Box::new)?;
            Ok((out.min_gap, out.records[0].gap))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let initial_gap = flat[0].1;
    let values = spec.collect(flat.iter().map(|v| v.0).collect());
    let sweep = SweepReport::new("min_gap_vs_k", spec, values)?;
    let final_ratio = sweep.fit.median_y[sweep.fit.median_y.len() - 1] / initial_gap;
    Ok(GlobalSweepReport { sweep, initial_gap, final_ratio })
}
