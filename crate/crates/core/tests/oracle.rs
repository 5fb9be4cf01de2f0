mod common;

use common::*;
use neural_ppo::oracle::{density_ratio_coeffs, optimality_gap, solve_optimal};
use neural_ppo::{seeded_rng, PolicyTable};

#[test]
fn optimum_matches_brute_force_enumeration() {
    for seed in 0..15 {
        let mdp = random_sized_mdp(seed);
        let sol = solve_optimal(&mdp).unwrap();
        let (actions, v) = brute_force_optimum(&mdp);
        for (a, b) in sol.v_star.iter().zip(&v) {
            assert!((a - b).abs() < 1e-9, "seed {seed}");
        }
        let v_greedy = deterministic_values(&mdp, &sol.actions);
        for (a, b) in v_greedy.iter().zip(&v) {
            assert!((a - b).abs() < 1e-9);
        }
        let _ = actions;
        assert!(sol.optimality_residual() < 1e-9);
    }
}

#[test]
fn gap_is_nonnegative_and_zero_at_optimum() {
    for seed in 0..15 {
        let mdp = random_sized_mdp(seed);
        let sol = solve_optimal(&mdp).unwrap();
        assert!(optimality_gap(&mdp, &sol.pi_star, &sol).unwrap().abs() < 1e-12);
        for k in 0..10 {
            let pi = PolicyTable::random(mdp.n_states(), mdp.n_actions(), &mut seeded_rng(seed, k));
            assert!(optimality_gap(&mdp, &pi, &sol).unwrap() >= -1e-10);
        }
    }
}

#[test]
fn gap_is_invariant_to_action_relabeling() {
    let mdp = random_mdp(4, 3, 3, 0.9);
    let perm = [2, 0, 1];
    let file = mdp.to_file();
    let mut relabeled = file.clone();
    for s in 0..3 {
        for (a, &pa) in perm.iter().enumerate() {
            relabeled.reward[s][pa] = file.reward[s][a];
            relabeled.transition[s][pa] = file.transition[s][a].clone();
            relabeled.features.as_mut().unwrap()[s][pa] = file.features.as_ref().unwrap()[s][a].clone();
        }
    }
    let other = neural_ppo::FiniteMdp::from_file(relabeled).unwrap();
    let pi = PolicyTable::random(3, 3, &mut seeded_rng(0, 0));
    let pi_perm = PolicyTable::new(neural_ppo::SaTable::from_fn(3, 3, |s, a| {
        pi.prob(s, perm.iter().position(|p| *p == a).unwrap())
    }))
    .unwrap();
    let g1 = optimality_gap(&mdp, &pi, &solve_optimal(&mdp).unwrap()).unwrap();
    let g2 = optimality_gap(&other, &pi_perm, &solve_optimal(&other).unwrap()).unwrap();
    assert!((g1 - g2).abs() < 1e-10);
}

#[test]
fn density_ratios_vanish_at_the_optimum_only() {
    let mdp = random_mdp(2, 4, 2, 0.9);
    let sol = solve_optimal(&mdp).unwrap();
    let (phi, psi) = density_ratio_coeffs(&mdp, &sol.pi_star, &sol).unwrap();
    assert_eq!((phi, psi), (0.0, 0.0));
    let (phi, psi) = density_ratio_coeffs(&mdp, &PolicyTable::uniform(4, 2), &sol).unwrap();
    assert!(phi > 0.0 && psi > 0.0);
}
