//! Closed-form and statistical oracles for the exact operators and the pool.

use nalgebra::{DMatrix, DVector};
use rpbt_core::expectile::BackupKind;
use rpbt_core::model::{ActionSpace, RiskConfig, TabularMdp, TabularPolicy};
use rpbt_core::population::{sample_opponent, PolicyPool};
use rpbt_core::rppo::{AgentState, RppoConfig};
use rpbt_core::seeded_rng;
use rpbt_core::verify::{random_deterministic_mdp, random_mdp, solve_within};

/// Solves `(I - gamma P) V = r` on nonterminal states, with terminal values 0.
fn linear_values(mdp: &TabularMdp, pi: &TabularPolicy, gamma: f64) -> DVector<f64> {
    let n = mdp.n_states();
    let chain = mdp.induced_chain(pi).unwrap();
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut r = DVector::<f64>::zeros(n);
    for s in 0..n {
        if mdp.is_terminal(s) {
            continue;
        }
        for s2 in 0..n {
            a[(s, s2)] -= gamma * chain[s][s2];
        }
        for act in 0..mdp.n_actions() {
            for o in mdp.outcomes(s, act) {
                r[s] += pi.prob(s, act) * o.prob * o.reward;
            }
        }
    }
    a.lu().solve(&r).expect("I - gamma P is invertible")
}

#[test]
fn neutral_fixed_point_matches_linear_solve() {
    let mut rng = seeded_rng(7, 0);
    for i in 0..50 {
        let (mdp, pi) = random_mdp(&mut rng, 10, 3);
        let gamma = [0.8, 0.9, 0.95][i % 3];
        let risk = RiskConfig::new(0.5, gamma, 0.0).unwrap();
        let v = solve_within(&mdp, &pi, &risk, BackupKind::Expectile, 1e-11, 1_000_000).unwrap();
        let want = linear_values(&mdp, &pi, gamma);
        for s in 0..mdp.n_states() {
            assert!((v[s] - want[s]).abs() < 1e-9, "mdp {i} state {s}: {} vs {}", v[s], want[s]);
        }
    }
}

#[test]
fn deterministic_fixed_point_ignores_tau() {
    let mut rng = seeded_rng(7, 1);
    for i in 0..30 {
        let (mdp, pi) = random_deterministic_mdp(&mut rng, 10, 3);
        let want = linear_values(&mdp, &pi, 0.9);
        for tau in [0.05, 0.3, 0.7, 0.95] {
            let risk = RiskConfig::new(tau, 0.9, 0.0).unwrap();
            let v = solve_within(&mdp, &pi, &risk, BackupKind::Expectile, 1e-11, 10_000_000).unwrap();
            for s in 0..mdp.n_states() {
                assert!((v[s] - want[s]).abs() < 1e-9, "mdp {i} tau {tau} state {s}");
            }
        }
    }
}

#[test]
fn pool_sampling_is_uniform() {
    let cfg = RppoConfig::toy(0.5).unwrap();
    let agent = AgentState::new(4, &ActionSpace::Discrete(3), cfg, 0).unwrap();
    let mut pool = PolicyPool::default();
    let k = 10;
    for i in 0..k {
        pool.push(i % 5, i / 5, &agent);
    }
    let draws = 50_000;
    let mut counts = vec![0usize; k];
    let mut rng = seeded_rng(3, 0);
    for _ in 0..draws {
        counts[sample_opponent(&pool, &mut rng).unwrap().id] += 1;
    }
    let expected = draws as f64 / k as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of chi-square with 9 degrees of freedom.
    assert!(chi2 < 27.88, "chi-square {chi2} for counts {counts:?}");
}
