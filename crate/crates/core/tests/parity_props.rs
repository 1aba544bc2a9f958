mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpy_core::fair_lp::solve_fair;
use rpy_core::lp::LpStatus;
use rpy_core::mdp::{GroupPair, Mdp, Policy};
use rpy_core::parity::{
    analyze, bound_theorem1, check_prop2, prop1_counterexample, return_disparity, transition_differences, Witness,
};

#[test]
fn bounds_hold_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..1000 {
        let pair = common::random_pair(&mut rng, 6, 4, &[0.5, 0.9]);
        let (m, n) = (pair.num_states(), pair.num_actions());
        let pi0 = Policy::random(m, n, &mut rng);
        let pi1 = Policy::random(m, n, &mut rng);
        let r = analyze(&pair, &pi0, &pi1, &Witness::SupNormBall).unwrap();
        assert!(r.delta_ret <= r.bound_thm1.total + 1e-7);
        assert!(r.delta_ret <= r.bound_thm2.total + 1e-7);
        for t in [
            r.bound_thm1.reward_gap_term,
            r.bound_thm1.policy_term,
            r.bound_thm1.visitation_ipm_term,
            r.bound_thm2.occupancy_ipm_term,
        ] {
            assert!(t >= 0.0);
        }
    }
}

#[test]
fn lipschitz_witness_bound_holds_with_certified_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..100 {
        let pair = common::random_pair(&mut rng, 5, 3, &[0.5, 0.9]);
        let (m, n) = (pair.num_states(), pair.num_actions());
        let pi0 = Policy::random(m, n, &mut rng);
        let pi1 = Policy::random(m, n, &mut rng);
        // Under the 0/1 metric the smallest valid constant is the spread of
        // the witness function; 2R covers every reward-derived function.
        let w = Witness::lipschitz_discrete(2.0 * pair.reward_bound(), m);
        let r = analyze(&pair, &pi0, &pi1, &w).unwrap();
        assert!(r.delta_ret <= r.bound_thm1.total + 1e-7);
        assert!(r.delta_ret <= r.bound_thm2.total + 1e-7);
    }
}

#[test]
fn prop1_disparity_is_policy_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let pair = prop1_counterexample(3.0, 0.9).unwrap();
    let gaps: Vec<f64> = (0..1000)
        .map(|_| {
            let a = Policy::random(2, 2, &mut rng);
            let b = Policy::random(2, 2, &mut rng);
            return_disparity(&pair, &a, &b).unwrap()
        })
        .collect();
    let spread = gaps.iter().cloned().fold(f64::MIN, f64::max) - gaps.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread <= 1e-9);
}

#[test]
fn shared_reward_and_policy_leave_only_visitation_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..100 {
        let m = rng.random_range(1..=5);
        let n = rng.random_range(1..=3);
        let pair = common::shared_reward_pair(&mut rng, m, n, 0.9);
        let pi = Policy::random(m, n, &mut rng);
        let b = bound_theorem1(&pair, &pi, &pi, &Witness::SupNormBall).unwrap();
        assert_eq!(b.reward_gap_term, 0.0);
        assert_eq!(b.policy_term, 0.0);
        assert_eq!(b.total, b.visitation_ipm_term);
    }
}

/// Largest `min_ij <c, d_ij>` over sampled directions orthogonal to ones,
/// scaled onto the unit box.
fn sampled_margin(pair: &GroupPair, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let d = transition_differences(pair);
    let m = pair.num_states();
    let mut best = f64::NEG_INFINITY;
    for _ in 0..samples {
        let mut c: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean = c.iter().sum::<f64>() / m as f64;
        c.iter_mut().for_each(|v| *v -= mean);
        let scale = c.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if scale == 0.0 {
            continue;
        }
        c.iter_mut().for_each(|v| *v /= scale);
        let worst = d
            .iter()
            .map(|dij| dij.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        best = best.max(worst);
    }
    best
}

fn two_state_pair(t0: [f64; 2], t1: [f64; 2]) -> GroupPair {
    let mk = |t: [f64; 2]| Mdp::new(2, 1, 0.9, vec![0.5, 0.5], vec![t[0], 1.0 - t[0], t[1], 1.0 - t[1]], vec![1.0, 0.0]).unwrap();
    GroupPair::new(mk(t0), mk(t1), 0.5).unwrap()
}

#[test]
fn prop2_direction_matches_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let split = two_state_pair([1.0, 1.0], [0.0, 0.0]);
    let out = check_prop2(&split).unwrap();
    assert!(!out.holds);
    assert!((out.margin - 2.0).abs() < 1e-9);
    let sampled = sampled_margin(&split, 100_000, &mut rng);
    assert!((sampled - 2.0).abs() < 1e-9, "{sampled}");

    for _ in 0..30 {
        let m = rng.random_range(2..=4);
        let n = rng.random_range(1..=3);
        let pair = common::shared_reward_pair(&mut rng, m, n, 0.9);
        let out = check_prop2(&pair).unwrap();
        let sampled = sampled_margin(&pair, 20_000, &mut rng);
        // sampling can only find directions the LP already dominates
        assert!(sampled <= out.margin + 1e-9, "{sampled} > {}", out.margin);
        assert_eq!(out.holds, out.margin <= 1e-9);
    }
}

#[test]
fn prop2_opposite_differences_hold() {
    // state 0 under group 0 leans to s0, state 1 under group 0 leans to s1 by the same amount
    let pair = two_state_pair([0.8, 0.2], [0.2, 0.8]);
    let d = transition_differences(&pair);
    assert!(d[0].iter().zip(&d[1]).all(|(a, b)| (a + b).abs() < 1e-12));
    assert!(check_prop2(&pair).unwrap().holds);
}

#[test]
fn prop2_holds_implies_zero_parity_lp_is_feasible() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let mut checked = 0;
    while checked < 200 {
        let m = rng.random_range(1..=4);
        let n = rng.random_range(1..=3);
        let pair = common::shared_reward_pair(&mut rng, m, n, 0.9);
        if !check_prop2(&pair).unwrap().holds {
            continue;
        }
        assert_eq!(solve_fair(&pair, 0.0).unwrap().status, LpStatus::Optimal);
        checked += 1;
    }
}
