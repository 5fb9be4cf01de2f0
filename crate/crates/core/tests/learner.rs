mod common;

use std::sync::Arc;

use common::*;
use neural_ppo::harness::sweep::{realizable_target, reference_mdp};
use neural_ppo::learner::{
    self, approximate_stationary_point, meta_step, td_problem, update_variance, weighted_mse, MetaProblem, PairContext,
    TupleDistribution,
};
use neural_ppo::mdp::{exact_q, stationary_state_action_distribution};
use neural_ppo::{seeded_rng, NetInit, PolicyTable};

fn context(m: usize, seed: u64) -> (neural_ppo::FiniteMdp, Arc<PairContext>) {
    let mdp = reference_mdp();
    let init = Arc::new(NetInit::from_seed(m, mdp.d(), seed).unwrap());
    let ctx = Arc::new(PairContext::for_mdp(init, &mdp).unwrap());
    (mdp, ctx)
}

#[test]
fn single_step_without_projection_moves_along_the_gradient() {
    let (mdp, ctx) = context(32, 0);
    let mut net = neural_ppo::TwoLayerNet::new(ctx.init().clone(), 10.0).unwrap();
    let x = mdp.feature(1, 2).to_vec();
    let before = net.alpha().to_vec();
    let g = net.grad(&x).unwrap();
    let u = net.forward(&x).unwrap();
    let eta = 1e-3;
    meta_step(&mut net, &x, &x, 0.0, 0.5, eta);
    for ((a, b), gi) in net.alpha().iter().zip(&before).zip(&g) {
        assert!((a - (b - eta * (u - 0.5) * gi)).abs() < 1e-15);
    }
}

#[test]
fn td_stationary_point_reproduces_q_under_the_linearization() {
    let (mdp, ctx) = context(2048, 1);
    let pi = PolicyTable::uniform(5, 3);
    let sigma = stationary_state_action_distribution(&mdp, &pi).unwrap();
    let problem = td_problem(ctx.clone(), &mdp, &pi, 100.0, 1024, sigma.weights().to_vec()).unwrap();
    let net = approximate_stationary_point(&problem, 1e-9).unwrap();
    let q = exact_q(&mdp, &pi).unwrap();
    let lin = ctx.eval_linearized(net.alpha());
    assert!(weighted_mse(sigma.weights(), &lin, q.as_slice()) < 1e-16);
}

#[test]
fn sgd_error_decreases_with_iterations_on_a_realizable_target() {
    let (mdp, ctx) = context(1024, 2);
    let pi = PolicyTable::uniform(5, 3);
    let sigma = stationary_state_action_distribution(&mdp, &pi).unwrap();
    let target = realizable_target(&ctx, 1.0, &mut seeded_rng(2, 3));
    let err = |t: usize| {
        let dist = TupleDistribution::pairs_only(sigma.weights().to_vec());
        let problem = MetaProblem::new(ctx.clone(), 0.0, target.clone(), 10.0, t, dist).unwrap();
        let samples = problem.sample(&mut seeded_rng(2, 2)).unwrap();
        let out = learner::run(&problem, &samples, false).unwrap();
        weighted_mse(sigma.weights(), &ctx.eval(&out.averaged), &target)
    };
    let (a, b) = (err(64), err(4096));
    assert!(b < 0.5 * a, "{a} -> {b}");
}

#[test]
fn zero_reward_critic_beats_the_zero_predictor_baseline() {
    let base = reference_mdp();
    let file = base.to_file();
    let zero = neural_ppo::FiniteMdp::new(
        0.9,
        vec![vec![0.0; 3]; 5],
        file.transition.clone(),
        file.features.clone(),
        file.eps_mix,
    )
    .unwrap();
    let init = Arc::new(NetInit::from_seed(4096, zero.d(), 0).unwrap());
    let ctx = Arc::new(PairContext::for_mdp(init, &zero).unwrap());
    let pi = PolicyTable::uniform(5, 3);
    let sigma = stationary_state_action_distribution(&zero, &pi).unwrap();
    let problem = td_problem(ctx.clone(), &zero, &pi, 10.0, 4096, sigma.weights().to_vec()).unwrap();
    let samples = problem.sample(&mut seeded_rng(0, 2)).unwrap();
    let out = learner::run(&problem, &samples, false).unwrap();
    let zeros = vec![0.0; 15];
    let learned = weighted_mse(sigma.weights(), &ctx.eval(&out.averaged), &zeros);
    let at_init = weighted_mse(sigma.weights(), ctx.u0(), &zeros);
    assert!(learned <= at_init, "{learned} vs {at_init}");
}

#[test]
fn exact_variance_grows_at_most_quadratically_in_the_radius() {
    let (mdp, ctx) = context(256, 3);
    let pi = PolicyTable::uniform(5, 3);
    let sigma = stationary_state_action_distribution(&mdp, &pi).unwrap();
    let mut values = vec![];
    for r in [1.0, 2.0, 4.0, 8.0] {
        let dist = TupleDistribution::pairs_only(sigma.weights().to_vec());
        let problem = MetaProblem::new(ctx.clone(), 0.0, vec![50.0; 15], r, 1000, dist).unwrap();
        let samples = problem.sample(&mut seeded_rng(3, 2)).unwrap();
        let out = learner::run(&problem, &samples, false).unwrap();
        values.push(update_variance(&problem, &out.final_net));
    }
    for w in values.windows(2) {
        assert!(w[1] <= 4.5 * w[0] + 1e-12);
    }
    let _ = q_series;
}
