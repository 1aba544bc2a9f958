use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpy_core::divergence::{
    discrete_metric, mmd2_population, mmd2_unbiased, total_variation, wasserstein1_discrete,
    wasserstein1_empirical_1d, KernelSpec, SampleBatch,
};
use rpy_core::linalg::DenseMatrix;

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(move |v| {
        let s: f64 = v.iter().sum();
        let mut p: Vec<f64> = v.iter().map(|x| x / s).collect();
        let head: f64 = p[..k - 1].iter().sum();
        p[k - 1] = 1.0 - head;
        p
    })
}

/// Euclidean distances between random points on a line: always a metric.
fn line_metric(points: &[f64]) -> DenseMatrix {
    let n = points.len();
    let mut d = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            d[(i, j)] = (points[i] - points[j]).abs();
        }
    }
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn divergences_are_symmetric(
        (p, q, pts) in (2usize..6).prop_flat_map(|k| (simplex(k), simplex(k), prop::collection::vec(-3.0f64..3.0, k)))
    ) {
        prop_assert!((total_variation(&p, &q).unwrap() - total_variation(&q, &p).unwrap()).abs() <= 1e-12);
        let d = line_metric(&pts);
        let a = wasserstein1_discrete(&p, &q, &d).unwrap();
        let b = wasserstein1_discrete(&q, &p, &d).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
        let k = KernelSpec::new(vec![0.5, 2.0]).unwrap();
        let embed: Vec<Vec<f64>> = pts.iter().map(|x| vec![*x]).collect();
        let a = mmd2_population(&p, &q, &embed, &k).unwrap();
        let b = mmd2_population(&q, &p, &embed, &k).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn w1_triangle_inequality(
        (p, q, r, pts) in (2usize..6).prop_flat_map(|k| (simplex(k), simplex(k), simplex(k), prop::collection::vec(-3.0f64..3.0, k)))
    ) {
        let d = line_metric(&pts);
        let pq = wasserstein1_discrete(&p, &q, &d).unwrap();
        let qr = wasserstein1_discrete(&q, &r, &d).unwrap();
        let pr = wasserstein1_discrete(&p, &r, &d).unwrap();
        prop_assert!(pr <= pq + qr + 1e-7);
    }

    #[test]
    fn w1_under_discrete_metric_is_tv((p, q) in (2usize..7).prop_flat_map(|k| (simplex(k), simplex(k)))) {
        let w = wasserstein1_discrete(&p, &q, &discrete_metric(p.len())).unwrap();
        prop_assert!((w - total_variation(&p, &q).unwrap()).abs() <= 1e-7);
    }

    #[test]
    fn empirical_1d_is_symmetric(x in prop::collection::vec(-5.0f64..5.0, 1..20), shift in -2.0f64..2.0) {
        let y: Vec<f64> = x.iter().rev().map(|v| v + shift).collect();
        let a = wasserstein1_empirical_1d(&x, &y).unwrap();
        prop_assert!((a - wasserstein1_empirical_1d(&y, &x).unwrap()).abs() <= 1e-12);
        // a pure shift moves every order statistic by the same amount
        prop_assert!((a - shift.abs()).abs() <= 1e-9);
    }
}

fn draw(p: &[f64], points: &[Vec<f64>], count: usize, rng: &mut ChaCha8Rng) -> SampleBatch {
    let rows: Vec<Vec<f64>> = (0..count)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut idx = p.len() - 1;
            for (i, v) in p.iter().enumerate() {
                acc += v;
                if u < acc {
                    idx = i;
                    break;
                }
            }
            points[idx].clone()
        })
        .collect();
    SampleBatch::from_rows(&rows).unwrap()
}

#[test]
fn unbiased_mmd_averages_to_population() {
    let points = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
    let k = KernelSpec::new(vec![0.1, 1.0]).unwrap();
    let p = [0.4, 0.3, 0.2, 0.1];
    let q = [0.1, 0.2, 0.3, 0.4];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let vals: Vec<f64> = (0..200)
        .map(|_| mmd2_unbiased(&draw(&p, &points, 200, &mut rng), &draw(&q, &points, 200, &mut rng), &k).unwrap())
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
    let pop = mmd2_population(&p, &q, &points, &k).unwrap();
    assert!((mean - pop).abs() <= 3.0 * sd / (vals.len() as f64).sqrt(), "{mean} vs {pop}");
}
