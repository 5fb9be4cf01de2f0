mod common;

use common::*;
use neural_ppo::harness::checks::{
    check_one_point_monotonicity, check_performance_difference, check_performance_difference_with, identity_suite,
    run_checks,
};
use neural_ppo::harness::rate::rate_fit;
use neural_ppo::mdp::exact_q;
use neural_ppo::oracle::solve_optimal;
use neural_ppo::ppo::{self, RunConfig};
use neural_ppo::{seeded_rng, FiniteMdp, PolicyTable};
use proptest::prelude::*;

#[test]
fn performance_difference_matches_advantage_form() {
    for seed in 0..10 {
        let mdp = random_sized_mdp(seed);
        let sol = solve_optimal(&mdp).unwrap();
        let pi = PolicyTable::random(mdp.n_states(), mdp.n_actions(), &mut seeded_rng(seed, 4));
        let q = exact_q(&mdp, &pi).unwrap();
        let v = v_of(&q, &pi);
        // (1-γ)⁻¹ E_{σ*}[A^π] with A^π(s,a) = Q^π(s,a) - V^π(s), evaluated on π* directly.
        let mut adv = 0.0;
        for (s, vs) in v.iter().enumerate() {
            for a in 0..mdp.n_actions() {
                adv += sol.sigma_star.weight(s, a) * (q.get(s, a) - vs);
            }
        }
        let gap_from_adv = adv / (1.0 - mdp.gamma());
        let gap = sol.l_star - sol.objective(&v);
        assert!((gap - gap_from_adv).abs() < 1e-10);
        assert!(check_performance_difference(&mdp, &pi, &sol).unwrap().pass);
        assert!(check_one_point_monotonicity(&mdp, &pi, &sol).unwrap().pass);
    }
}

#[test]
fn corrupted_q_fails_the_identity() {
    let mdp = random_mdp(0, 4, 3, 0.9);
    let sol = solve_optimal(&mdp).unwrap();
    let pi = PolicyTable::uniform(4, 3);
    let mut q = exact_q(&mdp, &pi).unwrap();
    q.set(0, 0, q.get(0, 0) + 0.5);
    q.set(1, 2, q.get(1, 2) - 0.5);
    assert!(!check_performance_difference_with(&mdp, &pi, &q, &sol).unwrap().pass);
}

#[test]
fn identity_suite_passes_on_random_policies() {
    let mdp = random_mdp(1, 5, 3, 0.9);
    let sol = solve_optimal(&mdp).unwrap();
    for check in identity_suite(&mdp, &sol, 1000, &mut seeded_rng(1, 6)).unwrap() {
        assert!(check.pass, "{check:?}");
    }
}

#[test]
fn one_action_mdp_degenerates_to_passing_checks() {
    let mdp = FiniteMdp::new(
        0.9,
        vec![vec![0.3], vec![-0.2]],
        vec![vec![vec![0.4, 0.6]], vec![vec![0.7, 0.3]]],
        None,
        None,
    )
    .unwrap();
    let cfg = RunConfig { k_iters: 3, t_f: 64, t_q: 64, m: 32, ..RunConfig::default() };
    let out = ppo::run(&mdp, &cfg).unwrap();
    for r in &out.records {
        assert_eq!(r.kl_star, 0.0);
        assert!(r.gap.abs() < 1e-12);
    }
    for c in run_checks(&out.records) {
        assert!(c.pass, "{c:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rate_fit_is_scale_invariant(
        slope in -2.0f64..2.0,
        c in 0.01f64..100.0,
        noise in proptest::collection::vec(0.9f64..1.1, 12),
    ) {
        let xs = [4.0, 16.0, 64.0, 256.0];
        let ys: Vec<Vec<f64>> = xs
            .iter()
            .enumerate()
            .map(|(i, x): (usize, &f64)| (0..3).map(|j| x.powf(slope) * noise[3 * i + j]).collect())
            .collect();
        let scaled: Vec<Vec<f64>> = ys.iter().map(|row| row.iter().map(|y| c * y).collect()).collect();
        let a = rate_fit(&xs, &ys).unwrap();
        let b = rate_fit(&xs, &scaled).unwrap();
        prop_assert!((a.slope - b.slope).abs() < 1e-9);
        prop_assert!((a.half_width - b.half_width).abs() < 1e-9);
        let xs2: Vec<f64> = xs.iter().map(|x| x * c).collect();
        let d = rate_fit(&xs2, &ys).unwrap();
        prop_assert!((a.slope - d.slope).abs() < 1e-9);
    }
}
