use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpy_core::nn::{soft_update, Adam, AdamConfig, Mlp};

/// Straight-line re-evaluation used as an oracle for `predict`.
fn reference_forward(sizes: &[usize], params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut off = 0;
    for l in 0..sizes.len() - 1 {
        let (i, o) = (sizes[l], sizes[l + 1]);
        let mut next = vec![0.0; o];
        for r in 0..o {
            let mut acc = params[off + i * o + r];
            for c in 0..i {
                acc += params[off + r * i + c] * cur[c];
            }
            next[r] = if l + 2 < sizes.len() { acc.max(0.0) } else { acc };
        }
        off += i * o + o;
        cur = next;
    }
    cur
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-6 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

fn random_sizes(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let depth = rng.random_range(2..=4);
    (0..depth).map(|_| rng.random_range(1..=6)).collect()
}

#[test]
fn forward_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let sizes = random_sizes(&mut rng);
        let net = Mlp::new(&sizes, &mut rng).unwrap();
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let want = reference_forward(&sizes, net.params(), &x);
        let got = net.predict(&x, 1).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

/// Loss kinds: squared error to a target, or a fixed linear functional.
fn loss(y: &[f64], target: &[f64], squared: bool) -> (f64, Vec<f64>) {
    if squared {
        let l = y.iter().zip(target).map(|(a, b)| 0.5 * (a - b).powi(2)).sum();
        (l, y.iter().zip(target).map(|(a, b)| a - b).collect())
    } else {
        (y.iter().zip(target).map(|(a, b)| a * b).sum(), target.to_vec())
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..50 {
        let sizes = random_sizes(&mut rng);
        let net = Mlp::new(&sizes, &mut rng).unwrap();
        let batch = rng.random_range(1..=3);
        let x: Vec<f64> = (0..batch * sizes[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let out = *sizes.last().unwrap();
        let target: Vec<f64> = (0..batch * out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let squared = case % 2 == 0;
        let (y, mut tape) = net.forward(&x, batch).unwrap();
        let (_, dy) = loss(&y, &target, squared);
        let (grads, _) = net.backward(&mut tape, &dy).unwrap();
        let h = 1e-5;
        for k in 0..net.num_params() {
            let mut p = net.clone();
            p.params_mut()[k] += h;
            let lp = loss(&p.predict(&x, batch).unwrap(), &target, squared).0;
            p.params_mut()[k] -= 2.0 * h;
            let lm = loss(&p.predict(&x, batch).unwrap(), &target, squared).0;
            let fd = (lp - lm) / (2.0 * h);
            assert!(rel_err(fd, grads[k]) <= 1e-4, "case {case} param {k}: {fd} vs {}", grads[k]);
        }
    }
}

#[test]
fn gradients_through_extractor_into_q() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..50 {
        let d_in = rng.random_range(1..=5);
        let d_h = rng.random_range(1..=5);
        let extractor = Mlp::new(&[d_in, rng.random_range(2..=6), d_h], &mut rng).unwrap();
        let q = Mlp::new(&[d_h, rng.random_range(2..=6), 3], &mut rng).unwrap();
        let x: Vec<f64> = (0..d_in).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let squared = case % 2 == 1;
        let eval = |e: &Mlp, qn: &Mlp| loss(&qn.predict(&e.predict(&x, 1).unwrap(), 1).unwrap(), &target, squared).0;

        let (h, mut te) = extractor.forward(&x, 1).unwrap();
        let (y, mut tq) = q.forward(&h, 1).unwrap();
        let (_, dy) = loss(&y, &target, squared);
        let (gq, dh) = q.backward(&mut tq, &dy).unwrap();
        let (ge, _) = extractor.backward(&mut te, &dh).unwrap();
        let step = 1e-5;
        for k in 0..extractor.num_params() {
            let mut p = extractor.clone();
            p.params_mut()[k] += step;
            let lp = eval(&p, &q);
            p.params_mut()[k] -= 2.0 * step;
            let lm = eval(&p, &q);
            let fd = (lp - lm) / (2.0 * step);
            assert!(rel_err(fd, ge[k]) <= 1e-4, "extractor {k}: {fd} vs {}", ge[k]);
        }
        for k in 0..q.num_params() {
            let mut p = q.clone();
            p.params_mut()[k] += step;
            let lp = eval(&extractor, &p);
            p.params_mut()[k] -= 2.0 * step;
            let lm = eval(&extractor, &p);
            let fd = (lp - lm) / (2.0 * step);
            assert!(rel_err(fd, gq[k]) <= 1e-4, "q {k}: {fd} vs {}", gq[k]);
        }
    }
}

#[test]
fn optimizer_trajectories_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Mlp::new(&[3, 8, 2], &mut rng).unwrap();
        let mut opt = Adam::new(net.num_params(), AdamConfig::default());
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (y, mut tape) = net.forward(&x, 1).unwrap();
            let (g, _) = net.backward(&mut tape, &y).unwrap();
            opt.step(net.params_mut(), &g).unwrap();
        }
        net
    };
    assert_eq!(run().params(), run().params());
}

#[test]
fn soft_update_composes_affinely() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let online: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let start: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tau = rng.random_range(0.0..1.0);
        let mut twice = start.clone();
        soft_update(&mut twice, &online, tau).unwrap();
        soft_update(&mut twice, &online, tau).unwrap();
        let mut once = start.clone();
        soft_update(&mut once, &online, 1.0 - (1.0 - tau) * (1.0 - tau)).unwrap();
        for (a, b) in twice.iter().zip(&once) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
