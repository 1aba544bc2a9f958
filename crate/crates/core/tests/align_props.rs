use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rpy_core::align::{AlignTrainer, AlignmentKind, TrainConfig, Transition};
use rpy_core::divergence::{mmd2_unbiased, KernelSpec, SampleBatch};
use rpy_core::envs::{EnvPair, RecSimConfig, RecSimPair, TabularEnvPair};
use rpy_core::mdp::{GroupPair, Mdp};
use rpy_core::nn::Mlp;
use rpy_core::parity::prop1_counterexample;

fn param_hash(net: &Mlp) -> u64 {
    let mut h = DefaultHasher::new();
    for p in net.params() {
        p.to_bits().hash(&mut h);
    }
    h.finish()
}

fn toy_trainer(lr: f64) -> AlignTrainer {
    let cfg = TrainConfig {
        align_lr: lr,
        extractor_width: Some(1),
        hidden: vec![],
        ..TrainConfig::tiny()
    };
    let mut tr = AlignTrainer::new(cfg, 1, 2, 0).unwrap();
    let identity = Mlp::from_params(&[1, 1], vec![1.0, 0.0]).unwrap();
    tr.set_extractors([identity.clone(), identity]).unwrap();
    tr
}

fn gaussian_batch(mean: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = Normal::new(mean, 1.0).unwrap();
    (0..n).map(|_| vec![d.sample(rng)]).collect()
}

fn mapped_mmd(tr: &AlignTrainer, s0: &[Vec<f64>], s1: &[Vec<f64>], k: &KernelSpec) -> f64 {
    let f = |g: usize, s: &[Vec<f64>]| {
        let x: Vec<f64> = s.iter().map(|v| v[0]).collect();
        SampleBatch::new(1, tr.extractor(g).predict(&x, s.len()).unwrap()).unwrap()
    };
    mmd2_unbiased(&f(0, s0), &f(1, s1), k).unwrap()
}

#[test]
fn toy_alignment_shrinks_mmd_tenfold_and_smoothly() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let s0 = gaussian_batch(0.0, 200, &mut rng);
    let s1 = gaussian_batch(5.0, 200, &mut rng);
    let mut tr = toy_trainer(0.05);
    let k = KernelSpec::multiscale();
    let before = mapped_mmd(&tr, &s0, &s1, &k);
    let mut losses = Vec::new();
    for _ in 0..500 {
        losses.push(tr.alignment_update(&s0, &s1).unwrap());
    }
    let after = mapped_mmd(&tr, &s0, &s1, &k);
    assert!(after * 10.0 <= before, "{before} -> {after}");
    let windows: Vec<f64> = losses.chunks(20).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for w in windows.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "smoothed loss rose: {w:?}");
    }
}

#[test]
fn identical_extractors_on_identical_batches_give_no_signal() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = gaussian_batch(0.0, 50, &mut rng);
    let mut tr = toy_trainer(1e-3);
    let loss = tr.alignment_update(&s, &s).unwrap();
    assert!(loss <= 1e-10, "{loss}");
}

#[test]
fn zero_critic_reports_zero_distance() {
    let cfg = TrainConfig {
        alignment: AlignmentKind::Wasserstein {
            critic_steps: 5,
            clip: 0.1,
            critic_hidden: 4,
        },
        ..TrainConfig::tiny()
    };
    let mut tr = AlignTrainer::new(cfg, 3, 2, 5).unwrap();
    tr.critic_mut().unwrap().params_mut().iter_mut().for_each(|p| *p = 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a: Vec<Vec<f64>> = (0..10).map(|_| gaussian_batch(0.0, 3, &mut rng).concat()).collect();
    let b: Vec<Vec<f64>> = (0..7).map(|_| gaussian_batch(4.0, 3, &mut rng).concat()).collect();
    // only the output bias can drift (by rounding), and it cancels in the difference
    assert!(tr.alignment_update(&a, &b).unwrap().abs() <= 1e-12);
}

#[test]
fn critic_weights_stay_clipped() {
    let cfg = TrainConfig {
        alignment: AlignmentKind::Wasserstein {
            critic_steps: 5,
            clip: 0.1,
            critic_hidden: 8,
        },
        align_lr: 0.05,
        ..TrainConfig::tiny()
    };
    let mut tr = AlignTrainer::new(cfg, 3, 2, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<Vec<f64>> = (0..16).map(|_| gaussian_batch(0.0, 3, &mut rng).concat()).collect();
    let b: Vec<Vec<f64>> = (0..16).map(|_| gaussian_batch(3.0, 3, &mut rng).concat()).collect();
    for _ in 0..20 {
        tr.alignment_update(&a, &b).unwrap();
        assert!(tr.critic().unwrap().params().iter().all(|p| p.abs() <= 0.1));
    }
}

#[test]
fn block_coordinate_rule_freezes_the_lower_group() {
    for kind in [
        AlignmentKind::default(),
        AlignmentKind::Wasserstein {
            critic_steps: 5,
            clip: 0.1,
            critic_hidden: 8,
        },
    ] {
        let cfg = TrainConfig {
            alignment: kind,
            ..TrainConfig::tiny()
        };
        let mut tr = AlignTrainer::new(cfg, 4, 3, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<Vec<f64>> = (0..16).map(|_| gaussian_batch(0.0, 4, &mut rng).concat()).collect();
        let b: Vec<Vec<f64>> = (0..16).map(|_| gaussian_batch(2.0, 4, &mut rng).concat()).collect();
        for (r0, r1) in [(5.0, 1.0), (1.0, 5.0), (2.0, 9.0), (1.0, 9.0)] {
            tr.record_episode_return(0, r0);
            tr.record_episode_return(1, r1);
            // window is long, so check the rule against the running means
            let expect = if tr.recent_return(1) > tr.recent_return(0) { 1 } else { 0 };
            assert_eq!(tr.leader(), expect);
            let before = [param_hash(tr.extractor(0)), param_hash(tr.extractor(1))];
            tr.alignment_update(&a, &b).unwrap();
            let after = [param_hash(tr.extractor(0)), param_hash(tr.extractor(1))];
            let lead = tr.leader();
            assert_ne!(before[lead], after[lead], "leader {lead} did not move");
            assert_eq!(before[1 - lead], after[1 - lead], "follower {} moved", 1 - lead);
        }
    }
}

fn one_hot_transition(s: usize, a: usize, r: f64, next: usize, done: bool) -> Transition {
    let mut f = vec![0.0; 2];
    f[s] = 1.0;
    let mut n = vec![0.0; 2];
    n[next] = 1.0;
    Transition {
        features: f,
        action: a,
        reward: r,
        next_features: n,
        done,
        next_valid: vec![true; 2],
    }
}

/// Trainer whose extractors are the identity on one-hot states and whose
/// Q-networks are plain linear tables.
fn table_trainer(tau: f64, q: [[f64; 2]; 2], q_target: [[f64; 2]; 2]) -> AlignTrainer {
    let cfg = TrainConfig {
        hidden: vec![],
        tau,
        gamma: 0.9,
        ..TrainConfig::tiny()
    };
    let mut tr = AlignTrainer::new(cfg, 2, 2, 0).unwrap();
    let ident = Mlp::from_params(&[2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    tr.set_extractors([ident.clone(), ident]).unwrap();
    // weight (action x state) row-major; Q(s, a) = W[a][s]
    let table = |t: [[f64; 2]; 2]| vec![t[0][0], t[1][0], t[0][1], t[1][1], 0.0, 0.0];
    tr.q_mut().params_mut().copy_from_slice(&table(q));
    tr.q_target_mut().params_mut().copy_from_slice(&table(q_target));
    tr
}

#[test]
fn td_targets_follow_double_dqn_on_hand_tables() {
    // Q[s][a]. Online prefers action 1 in state 1; the target scores it at 2.
    let q = [[0.5, 0.0], [0.0, 5.0]];
    let qt = [[0.0, 0.0], [7.0, 2.0]];
    let mut tr = table_trainer(0.0, q, qt);
    let t = one_hot_transition(0, 0, 1.0, 1, false);
    let loss = tr.td_update(&[&t], &[]).unwrap();
    // y = 1 + 0.9 * 2 = 2.8, Q(s0, a0) = 0.5
    assert!((loss - (0.5f64 - 2.8).powi(2)).abs() < 1e-12, "{loss}");

    let mut tr = table_trainer(0.0, q, qt);
    let t = one_hot_transition(1, 1, -1.0, 0, true);
    let loss = tr.td_update(&[], &[&t]).unwrap();
    assert!((loss - (5.0f64 + 1.0).powi(2)).abs() < 1e-12, "{loss}");
}

#[test]
fn exact_fit_gives_zero_loss_and_no_movement() {
    let mut tr = table_trainer(0.5, [[0.0; 2]; 2], [[0.0; 2]; 2]);
    let before = (tr.q().clone(), tr.extractor(0).clone(), tr.q_target().clone());
    let t = one_hot_transition(0, 1, 0.0, 1, false);
    assert_eq!(tr.td_update(&[&t, &t], &[&t]).unwrap(), 0.0);
    assert_eq!(tr.q(), &before.0);
    assert_eq!(tr.extractor(0), &before.1);
    assert_eq!(tr.q_target(), &before.2);
}

#[test]
fn target_network_trails_online_by_tau() {
    let tau = 0.3;
    let mut tr = table_trainer(tau, [[0.2, -0.1], [0.4, 0.3]], [[1.0, 1.0], [1.0, 1.0]]);
    let t = one_hot_transition(0, 1, 1.0, 1, false);
    for _ in 0..5 {
        let old_target = tr.q_target().params().to_vec();
        tr.td_update(&[&t], &[&t]).unwrap();
        for ((new, old), online) in tr.q_target().params().iter().zip(&old_target).zip(tr.q().params()) {
            assert!((new - (tau * online + (1.0 - tau) * old)).abs() < 1e-15);
        }
    }
}

fn small_recsim() -> RecSimPair {
    RecSimPair::new(RecSimConfig {
        num_items: 20,
        horizon: 8,
        ..RecSimConfig::default()
    })
    .unwrap()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        iterations: 6,
        ..TrainConfig::tiny()
    }
}

#[test]
fn identical_seeds_replay_identically() {
    let env = small_recsim();
    let run = || {
        let mut tr = AlignTrainer::new(quick_config(), env.feature_dim(), env.num_actions(), 77).unwrap();
        let log = tr.train(&env).unwrap();
        let buf: Vec<Transition> = (0..2)
            .flat_map(|g| (0..tr.buffer(g).len()).map(move |i| (g, i)))
            .map(|(g, i)| tr.buffer(g).get(i).clone())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draw: Vec<Transition> = tr.buffer(0).sample(10, &mut rng).into_iter().cloned().collect();
        (log, buf, draw, param_hash(tr.q()))
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_alignment_ratio_matches_plain_training() {
    let env = small_recsim();
    let run = |alignment: AlignmentKind, ratio: [u32; 2]| {
        let cfg = TrainConfig {
            alignment,
            ratio,
            ..quick_config()
        };
        let mut tr = AlignTrainer::new(cfg, env.feature_dim(), env.num_actions(), 3).unwrap();
        let log = tr.train(&env).unwrap();
        (log, param_hash(tr.q()), param_hash(tr.extractor(0)), param_hash(tr.extractor(1)))
    };
    let plain = run(AlignmentKind::None, [1, 1]);
    assert_eq!(run(AlignmentKind::default(), [1, 0]), plain);
    let critic = AlignmentKind::Wasserstein {
        critic_steps: 5,
        clip: 0.1,
        critic_hidden: 8,
    };
    assert_eq!(run(critic, [4, 0]), plain);
    assert_ne!(run(AlignmentKind::default(), [1, 1]).0, plain.0);
}

#[test]
fn block_rule_audit_during_training() {
    let env = small_recsim();
    let mut tr = AlignTrainer::new(quick_config(), env.feature_dim(), env.num_actions(), 8).unwrap();
    tr.train(&env).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let states = |g: usize, rng: &mut ChaCha8Rng, tr: &AlignTrainer| -> Vec<Vec<f64>> {
        tr.buffer(g).sample(16, rng).into_iter().map(|t| t.features.clone()).collect()
    };
    for _ in 0..5 {
        let s0 = states(0, &mut rng, &tr);
        let s1 = states(1, &mut rng, &tr);
        let lead = tr.leader();
        let frozen = param_hash(tr.extractor(1 - lead));
        tr.alignment_update(&s0, &s1).unwrap();
        assert_eq!(param_hash(tr.extractor(1 - lead)), frozen);
    }
}

#[test]
fn no_model_updates_leaves_returns_at_random_level() {
    let env = small_recsim();
    let cfg = TrainConfig {
        updates_per_iteration: 0,
        ratio: [1, 0],
        eval_episodes: 50,
        ..quick_config()
    };
    // uniform-random baseline per group
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let random_return = |g: usize, rng: &mut ChaCha8Rng| -> f64 {
        let n = 4000;
        let mut total = 0.0;
        for k in 0..n {
            let mut ep = env.reset(g, 1_000_000 + k).unwrap();
            while !ep.is_done() {
                let valid: Vec<usize> = (0..env.num_actions()).filter(|a| ep.valid_actions()[*a]).collect();
                let a = valid[rand::Rng::random_range(rng, 0..valid.len())];
                total += ep.step(a).unwrap().reward;
            }
        }
        total / n as f64
    };
    let baseline = [random_return(0, &mut rng), random_return(1, &mut rng)];
    let finals: Vec<[f64; 2]> = (0..5u64)
        .map(|seed| {
            let mut tr = AlignTrainer::new(cfg.clone(), env.feature_dim(), env.num_actions(), seed).unwrap();
            let row = tr.train(&env).unwrap().rows.pop().unwrap();
            [row.return0, row.return1]
        })
        .collect();
    for g in 0..2 {
        let xs: Vec<f64> = finals.iter().map(|f| f[g]).collect();
        let mean = xs.iter().sum::<f64>() / 5.0;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        let noise = 3.0 * sd / 5f64.sqrt();
        assert!((mean - baseline[g]).abs() <= noise, "group {g}: {mean} vs {} (noise {noise})", baseline[g]);
    }
}

#[test]
fn deterministic_env_has_zero_return_variance() {
    let mdp = Mdp::new(2, 2, 0.9, vec![1.0, 0.0], vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0], vec![0.5, -0.5, 1.0, 0.0]).unwrap();
    let env = TabularEnvPair::new(GroupPair::new(mdp.clone(), mdp, 0.5).unwrap(), 7).unwrap();
    let tr = AlignTrainer::new(TrainConfig::tiny(), 2, 2, 1).unwrap();
    let ev = tr.evaluate(&env, 10, 4, true).unwrap();
    assert_eq!(ev.stderr, [0.0, 0.0]);
    assert_eq!(ev.features[0].len(), 70);
}

#[test]
fn identical_groups_and_extractors_show_no_gap() {
    let m = vec![0.3, -0.2, 0.5, 0.0, 0.1, 0.4, -0.1, 0.2];
    let env = RecSimPair::new(RecSimConfig {
        group_means: Some([m.clone(), m]),
        ..RecSimConfig::default()
    })
    .unwrap();
    let mut tr = AlignTrainer::new(TrainConfig::tiny(), env.feature_dim(), env.num_actions(), 2).unwrap();
    let e = tr.extractor(0).clone();
    tr.set_extractors([e.clone(), e]).unwrap();
    let ev = tr.evaluate(&env, 200, 9, false).unwrap();
    let se = (ev.stderr[0].powi(2) + ev.stderr[1].powi(2)).sqrt();
    assert!(ev.gap <= 3.0 * se, "gap {} se {se}", ev.gap);
}

#[test]
fn prop1_gap_is_policy_independent_in_training() {
    let c = 2.0;
    let env = TabularEnvPair::new(prop1_counterexample(c, 0.9).unwrap(), 10).unwrap();
    for ratio in [[1, 0], [1, 1]] {
        let cfg = TrainConfig {
            ratio,
            ..quick_config()
        };
        let mut tr = AlignTrainer::new(cfg, 2, 2, 4).unwrap();
        let log = tr.train(&env).unwrap();
        for row in &log.rows {
            assert!((row.gap - c).abs() <= 1e-9, "{ratio:?}: {}", row.gap);
        }
    }
}
