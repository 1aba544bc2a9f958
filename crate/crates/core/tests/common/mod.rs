//! Shared fixtures for integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpy_core::mdp::{random_mdp, GroupPair, Mdp, Policy};
use rpy_core::parity::prop1_counterexample;

/// Fixed suite of small group pairs (m, n <= 3), regenerated bit-identically
/// from constant seeds.
pub fn golden_suite() -> Vec<GroupPair> {
    let mut out = vec![
        prop1_counterexample(1.0, 0.5).unwrap(),
        prop1_counterexample(5.0, 0.9).unwrap(),
    ];
    let lambdas = [0.5, 0.3, 0.7, 0.1];
    let mut rng = ChaCha8Rng::seed_from_u64(0x601d);
    for k in 0..58 {
        let m = 1 + k % 3;
        let n = 1 + (k / 3) % 3;
        let gamma = if k % 2 == 0 { 0.5 } else { 0.9 };
        let mdp0 = random_mdp(m, n, gamma, &mut rng).unwrap();
        // every fifth instance shares the MDP across groups
        let mdp1 = if k % 5 == 0 {
            mdp0.clone()
        } else {
            random_mdp(m, n, gamma, &mut rng).unwrap()
        };
        out.push(GroupPair::new(mdp0, mdp1, lambdas[k % lambdas.len()]).unwrap());
    }
    out
}

/// Every deterministic policy for an `m`-state, `n`-action problem.
pub fn deterministic_policies(m: usize, n: usize) -> Vec<Policy> {
    (0..n.pow(m as u32))
        .map(|code| {
            let actions: Vec<usize> = (0..m).map(|s| (code / n.pow(s as u32)) % n).collect();
            Policy::deterministic(n, &actions).unwrap()
        })
        .collect()
}

pub fn random_pair(rng: &mut ChaCha8Rng, max_m: usize, max_n: usize, gammas: &[f64]) -> GroupPair {
    let m = rng.random_range(1..=max_m);
    let n = rng.random_range(1..=max_n);
    let gamma = gammas[rng.random_range(0..gammas.len())];
    let lambda = rng.random_range(0.0..=1.0);
    GroupPair::random(m, n, gamma, lambda, rng).unwrap()
}

/// Random pair with shared state-only reward and shared initial distribution;
/// only the transitions differ.
pub fn shared_reward_pair(rng: &mut ChaCha8Rng, m: usize, n: usize, gamma: f64) -> GroupPair {
    let base0 = random_mdp(m, n, gamma, rng).unwrap();
    let base1 = random_mdp(m, n, gamma, rng).unwrap();
    let r_state: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let reward: Vec<f64> = (0..m).flat_map(|s| std::iter::repeat_n(r_state[s], n)).collect();
    let mu = base0.mu().to_vec();
    let flat_t = |mdp: &Mdp| -> Vec<f64> {
        (0..m)
            .flat_map(|s| (0..n).flat_map(move |a| mdp.transition_row(s, a).to_vec()))
            .collect()
    };
    let mdp0 = Mdp::new(m, n, gamma, mu.clone(), flat_t(&base0), reward.clone()).unwrap();
    let mdp1 = Mdp::new(m, n, gamma, mu, flat_t(&base1), reward).unwrap();
    GroupPair::new(mdp0, mdp1, rng.random_range(0.0..=1.0)).unwrap()
}
