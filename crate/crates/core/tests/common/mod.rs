//! Independent reference computations used by the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use neural_ppo::mdp::MdpGenerator;
use neural_ppo::{seeded_rng, FiniteMdp, PolicyTable, SaTable, TwoLayerNet};
use rand::Rng;

pub fn random_mdp(seed: u64, n_states: usize, n_actions: usize, gamma: f64) -> FiniteMdp {
    MdpGenerator::new(n_states, n_actions, gamma).generate(&mut seeded_rng(seed, 0)).unwrap()
}

/// Random sizes in `[2, 6] × [2, 4]`, `γ ∈ [0.5, 0.95]`.
pub fn random_sized_mdp(seed: u64) -> FiniteMdp {
    let mut rng = seeded_rng(seed, 99);
    let ns = rng.random_range(2..=6);
    let na = rng.random_range(2..=4);
    let gamma = rng.random_range(0.5..0.95);
    random_mdp(seed, ns, na, gamma)
}

/// `P_π[s][s'] = Σ_a π(a|s) P(s'|s,a)` by explicit loops.
pub fn state_chain(mdp: &FiniteMdp, pi: &PolicyTable) -> Vec<Vec<f64>> {
    let ns = mdp.n_states();
    (0..ns)
        .map(|s| {
            (0..ns)
                .map(|t| (0..mdp.n_actions()).map(|a| pi.prob(s, a) * mdp.transition_row(s, a)[t]).sum())
                .collect()
        })
        .collect()
}

/// Stationary distribution from the right singular vector of `P_πᵀ - I`
/// with the smallest singular value.
pub fn stationary_svd(mdp: &FiniteMdp, pi: &PolicyTable) -> Vec<f64> {
    let p = state_chain(mdp, pi);
    let n = p.len();
    let a = DMatrix::from_fn(n, n, |i, j| p[j][i] - if i == j { 1.0 } else { 0.0 });
    let svd = a.svd(false, true);
    let v_t = svd.v_t.unwrap();
    let (k, _) = svd.singular_values.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1)).unwrap();
    let row: Vec<f64> = v_t.row(k).iter().copied().collect();
    let sum: f64 = row.iter().sum();
    row.iter().map(|x| x / sum).collect()
}

/// `Q = (1-γ) Σ_{t<n} γ^t (P^π)^t r` on state-action pairs.
pub fn q_series(mdp: &FiniteMdp, pi: &PolicyTable, n_terms: usize) -> SaTable {
    let (ns, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let mut term = SaTable::from_fn(ns, na, |s, a| mdp.reward(s, a));
    let mut acc = SaTable::zeros(ns, na);
    let mut w = 1.0 - g;
    for _ in 0..n_terms {
        acc = acc.axpby(1.0, &term, w);
        let v: Vec<f64> = (0..ns).map(|s| (0..na).map(|a| pi.prob(s, a) * term.get(s, a)).sum()).collect();
        term = SaTable::from_fn(ns, na, |s, a| mdp.transition_row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum());
        w *= g;
    }
    acc
}

/// Values of a deterministic policy by solving `(I - γP)V = (1-γ)r` densely.
pub fn deterministic_values(mdp: &FiniteMdp, actions: &[usize]) -> Vec<f64> {
    let (ns, g) = (mdp.n_states(), mdp.gamma());
    let a = DMatrix::from_fn(ns, ns, |s, t| if s == t { 1.0 } else { 0.0 } - g * mdp.transition_row(s, actions[s])[t]);
    let b = nalgebra::DVector::from_fn(ns, |s, _| (1.0 - g) * mdp.reward(s, actions[s]));
    a.lu().solve(&b).unwrap().iter().copied().collect()
}

/// Enumerates all `|A|^|S|` deterministic policies and returns the one with the
/// largest value sum together with its values.
pub fn brute_force_optimum(mdp: &FiniteMdp) -> (Vec<usize>, Vec<f64>) {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let total = na.pow(ns as u32);
    let mut best: Option<(Vec<usize>, Vec<f64>, f64)> = None;
    for code in 0..total {
        let mut c = code;
        let actions: Vec<usize> = (0..ns)
            .map(|_| {
                let a = c % na;
                c /= na;
                a
            })
            .collect();
        let v = deterministic_values(mdp, &actions);
        let sum: f64 = v.iter().sum();
        if best.as_ref().is_none_or(|b| sum > b.2 + 1e-12) {
            best = Some((actions, v, sum));
        }
    }
    let (a, v, _) = best.unwrap();
    (a, v)
}

/// `u⁰_α(x) = m^{-1/2} Σ_i b_i 1{α_i(0)ᵀx > 0} α_iᵀx`, written out directly.
pub fn masked_linear(net: &TwoLayerNet, alpha: &[f64], x: &[f64]) -> f64 {
    let (m, d) = (net.m(), net.d());
    let mut total = 0.0;
    for i in 0..m {
        let a0 = &net.alpha0()[i * d..(i + 1) * d];
        let a = &alpha[i * d..(i + 1) * d];
        let pre0: f64 = a0.iter().zip(x).map(|(p, q)| p * q).sum();
        if pre0 > 0.0 {
            total += net.signs()[i] * a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
        }
    }
    total / (m as f64).sqrt()
}

/// Central finite-difference gradient of `u_α(x)` in `α`.
pub fn fd_grad(net: &TwoLayerNet, x: &[f64], h: f64) -> Vec<f64> {
    let base = net.alpha().to_vec();
    let init = net.init_ref().clone();
    (0..base.len())
        .map(|j| {
            let mut plus = base.clone();
            plus[j] += h;
            let mut minus = base.clone();
            minus[j] -= h;
            let eval = |alpha: &[f64]| {
                let delta: Vec<f64> = alpha.iter().zip(init.alpha0()).map(|(a, b)| a - b).collect();
                TwoLayerNet::with_delta(init.clone(), 1e6, &delta).unwrap().forward(x).unwrap()
            };
            (eval(&plus) - eval(&minus)) / (2.0 * h)
        })
        .collect()
}

/// Maximizes `⟨q, π⟩ - β KL(π ‖ p)` over the simplex by equality-constrained
/// Newton steps with a feasibility-preserving backtracking line search.
pub fn simplex_newton_max(q: &[f64], p: &[f64], beta: f64) -> Vec<f64> {
    let n = q.len();
    let objective = |pi: &[f64]| -> f64 {
        pi.iter().zip(q).zip(p).map(|((x, qa), pa)| x * qa - beta * x * (x / pa).ln()).sum()
    };
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..500 {
        let c: Vec<f64> = (0..n).map(|a| q[a] - beta * ((pi[a] / p[a]).ln() + 1.0)).collect();
        let nu = (0..n).map(|a| pi[a] * c[a]).sum::<f64>() / pi.iter().sum::<f64>();
        let step: Vec<f64> = (0..n).map(|a| pi[a] / beta * (c[a] - nu)).collect();
        let decrement: f64 = (0..n).map(|a| step[a] * (c[a] - nu)).sum();
        if decrement < 1e-30 {
            break;
        }
        let mut t = 1.0;
        let f0 = objective(&pi);
        loop {
            let cand: Vec<f64> = pi.iter().zip(&step).map(|(x, d)| x + t * d).collect();
            if cand.iter().all(|x| *x > 0.0) && objective(&cand) >= f0 + 0.25 * t * decrement {
                pi = cand;
                break;
            }
            t *= 0.5;
            if t < 1e-20 {
                return pi;
            }
        }
    }
    let s: f64 = pi.iter().sum();
    pi.iter().map(|x| x / s).collect()
}

/// `Σ_a π(a|s) Q(s,a)` for every state.
pub fn v_of(q: &SaTable, pi: &PolicyTable) -> Vec<f64> {
    (0..q.n_states()).map(|s| q.row(s).iter().zip(pi.row(s)).map(|(a, b)| a * b).sum()).collect()
}
