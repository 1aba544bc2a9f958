//! Distances between distributions and policies.
//!
//! Kernel convention: a bandwidth `b` denotes `k(x, y) = exp(-|x - y|^2 / (2 b))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::lp::{lp_solve, Direction, LpProblem, LpStatus, Sense};
use crate::mdp::Policy;

const DIST_TOL: f64 = 1e-9;

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    for (name, d) in [("p", p), ("q", q)] {
        if d.iter().any(|v| !v.is_finite() || *v < -DIST_TOL) {
            return Err(Error::Validation(format!("{name} has negative or non-finite mass")));
        }
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-8 {
            return Err(Error::Validation(format!("{name} sums to {s}")));
        }
    }
    Ok(())
}

/// `(1/2) |p - q|_1`.
pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// `|pi0(.|s) - pi1(.|s)|_1`.
pub fn policy_discrepancy(pi0: &Policy, pi1: &Policy, s: usize) -> Result<f64> {
    if pi0.num_states() != pi1.num_states() || pi0.num_actions() != pi1.num_actions() {
        return Err(Error::DimensionMismatch("policies differ in shape".into()));
    }
    if s >= pi0.num_states() {
        return Err(Error::IndexOutOfRange {
            index: s,
            len: pi0.num_states(),
        });
    }
    Ok(pi0
        .row(s)
        .iter()
        .zip(pi1.row(s))
        .map(|(a, b)| (a - b).abs())
        .sum())
}

/// Checks that `cost` is a finite metric on `n` points.
pub fn validate_metric(cost: &DenseMatrix, n: usize) -> Result<()> {
    if cost.rows() != n || cost.cols() != n {
        return Err(Error::DimensionMismatch(format!(
            "cost is {}x{}, expected {n}x{n}",
            cost.rows(),
            cost.cols()
        )));
    }
    for i in 0..n {
        if cost[(i, i)].abs() > DIST_TOL {
            return Err(Error::Validation(format!("cost[{i}][{i}] = {} is not zero", cost[(i, i)])));
        }
        for j in 0..n {
            let c = cost[(i, j)];
            if c < 0.0 || (c - cost[(j, i)]).abs() > DIST_TOL {
                return Err(Error::Validation(format!(
                    "cost is not a nonnegative symmetric matrix at ({i}, {j})"
                )));
            }
            for k in 0..n {
                if c > cost[(i, k)] + cost[(k, j)] + DIST_TOL {
                    return Err(Error::Validation(format!(
                        "cost violates the triangle inequality at ({i}, {k}, {j})"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Exact optimal-transport cost between `p` and `q` under the ground metric
/// `cost`, solved as an LP over the `m * m` coupling.
pub fn wasserstein1_discrete(p: &[f64], q: &[f64], cost: &DenseMatrix) -> Result<f64> {
    check_pair(p, q)?;
    let m = p.len();
    validate_metric(cost, m)?;
    let mut lp = LpProblem::new(Direction::Minimize, cost.as_slice().to_vec());
    for i in 0..m {
        let mut row = vec![0.0; m * m];
        row[i * m..(i + 1) * m].iter_mut().for_each(|v| *v = 1.0);
        lp.add_constraint(&row, Sense::Eq, p[i])?;
    }
    for j in 0..m {
        let mut row = vec![0.0; m * m];
        for i in 0..m {
            row[i * m + j] = 1.0;
        }
        lp.add_constraint(&row, Sense::Eq, q[j])?;
    }
    let out = lp_solve(&lp)?;
    match out.status {
        LpStatus::Optimal => Ok(out.value.unwrap_or(0.0).max(0.0)),
        s => Err(Error::LpStatus(format!("transport LP returned {s:?}"))),
    }
}

/// 0/1 ground metric.
pub fn discrete_metric(n: usize) -> DenseMatrix {
    let mut d = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                d[(i, j)] = 1.0;
            }
        }
    }
    d
}

/// W1 between two equal-size 1-D empirical samples via sorted pairing.
pub fn wasserstein1_empirical_1d(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::UnequalCounts(x.len(), y.len()));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    Ok(xs.iter().zip(&ys).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    bandwidths: Vec<f64>,
    weights: Vec<f64>,
}

impl KernelSpec {
    /// Equal-weight mixture over `bandwidths`.
    pub fn new(bandwidths: Vec<f64>) -> Result<Self> {
        let k = bandwidths.len();
        Self::with_weights(bandwidths, vec![1.0 / k.max(1) as f64; k])
    }

    pub fn with_weights(bandwidths: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::InvalidParameter("kernel needs at least one bandwidth".into()));
        }
        if bandwidths.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::InvalidParameter("bandwidths must be positive".into()));
        }
        if weights.len() != bandwidths.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} bandwidths",
                weights.len(),
                bandwidths.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidParameter("kernel weights must be finite".into()));
        }
        Ok(Self {
            bandwidths,
            weights,
        })
    }

    /// The eight-bandwidth mixture {0.001, ..., 10} used for alignment by default.
    pub fn multiscale() -> Self {
        Self::new(vec![0.001, 0.005, 0.01, 0.05, 0.1, 1.0, 5.0, 10.0]).expect("static bandwidths")
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    fn eval_sq(&self, d2: f64) -> f64 {
        self.bandwidths
            .iter()
            .zip(&self.weights)
            .map(|(b, w)| w * (-d2 / (2.0 * b)).exp())
            .sum()
    }

    /// Returns `(k, dk/d(d2))`.
    #[inline]
    fn eval_sq_with_slope(&self, d2: f64) -> (f64, f64) {
        let mut k = 0.0;
        let mut slope = 0.0;
        for (b, w) in self.bandwidths.iter().zip(&self.weights) {
            let e = w * (-d2 / (2.0 * b)).exp();
            k += e;
            slope -= e / (2.0 * b);
        }
        (k, slope)
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        self.eval_sq(sq_dist(x, y))
    }
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `count` feature vectors of length `dim`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    dim: usize,
    data: Vec<f64>,
}

impl SampleBatch {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch(format!(
                "{} values do not split into rows of {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample batch".into()));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch("ragged sample rows".into()));
        }
        Self::new(dim, rows.concat())
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

fn check_batches(h0: &SampleBatch, h1: &SampleBatch) -> Result<()> {
    if h0.dim != h1.dim {
        return Err(Error::DimensionMismatch(format!(
            "batches of dim {} and {}",
            h0.dim, h1.dim
        )));
    }
    for b in [h0, h1] {
        if b.count() < 2 {
            return Err(Error::BatchTooSmall {
                need: 2,
                got: b.count(),
            });
        }
    }
    Ok(())
}

/// Unbiased estimate of squared MMD. May be negative.
pub fn mmd2_unbiased(h0: &SampleBatch, h1: &SampleBatch, k: &KernelSpec) -> Result<f64> {
    check_batches(h0, h1)?;
    let (n0, n1) = (h0.count(), h1.count());
    let mut within0 = 0.0;
    for i in 0..n0 {
        for j in i + 1..n0 {
            within0 += 2.0 * k.eval(h0.row(i), h0.row(j));
        }
    }
    let mut within1 = 0.0;
    for i in 0..n1 {
        for j in i + 1..n1 {
            within1 += 2.0 * k.eval(h1.row(i), h1.row(j));
        }
    }
    let mut cross = 0.0;
    for i in 0..n0 {
        for j in 0..n1 {
            cross += k.eval(h0.row(i), h1.row(j));
        }
    }
    let (n0f, n1f) = (n0 as f64, n1 as f64);
    Ok(within0 / (n0f * (n0f - 1.0)) + within1 / (n1f * (n1f - 1.0)) - 2.0 * cross / (n0f * n1f))
}

/// [`mmd2_unbiased`] together with its gradient with respect to every
/// coordinate of both batches (row-major, same layout as the batches).
pub fn mmd2_unbiased_with_grad(
    h0: &SampleBatch,
    h1: &SampleBatch,
    k: &KernelSpec,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_batches(h0, h1)?;
    let (n0, n1, d) = (h0.count(), h1.count(), h0.dim);
    let (n0f, n1f) = (n0 as f64, n1 as f64);
    let c0 = 1.0 / (n0f * (n0f - 1.0));
    let c1 = 1.0 / (n1f * (n1f - 1.0));
    let cx = 2.0 / (n0f * n1f);
    let mut g0 = vec![0.0; n0 * d];
    let mut g1 = vec![0.0; n1 * d];
    let mut value = 0.0;

    // d k(x, y) / dx = slope * 2 (x - y)
    let mut accumulate = |xs: &SampleBatch,
                          ys: &SampleBatch,
                          gx: &mut [f64],
                          gy: Option<&mut [f64]>,
                          coef: f64,
                          same: bool| {
        let mut gy = gy;
        for i in 0..xs.count() {
            let start = if same { i + 1 } else { 0 };
            for j in start..ys.count() {
                let (x, y) = (xs.row(i), ys.row(j));
                let (kv, slope) = k.eval_sq_with_slope(sq_dist(x, y));
                let f = if same { 2.0 * coef } else { coef };
                value += f * kv;
                for t in 0..d {
                    let g = f * slope * 2.0 * (x[t] - y[t]);
                    gx[i * d + t] += g;
                    if same {
                        gx[j * d + t] -= g;
                    } else if let Some(gy) = gy.as_deref_mut() {
                        gy[j * d + t] -= g;
                    }
                }
            }
        }
    };
    accumulate(h0, h0, &mut g0, None, c0, true);
    accumulate(h1, h1, &mut g1, None, c1, true);
    accumulate(h0, h1, &mut g0, Some(&mut g1), -cx, false);
    Ok((value, g0, g1))
}

/// Exact squared MMD between two distributions over a shared finite point set.
pub fn mmd2_population(p: &[f64], q: &[f64], points: &[Vec<f64>], k: &KernelSpec) -> Result<f64> {
    check_pair(p, q)?;
    if points.len() != p.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} points for distributions of length {}",
            points.len(),
            p.len()
        )));
    }
    let diff: Vec<f64> = p.iter().zip(q).map(|(a, b)| a - b).collect();
    let mut total = 0.0;
    for (i, xi) in points.iter().enumerate() {
        if diff[i] == 0.0 {
            continue;
        }
        for (j, xj) in points.iter().enumerate() {
            total += diff[i] * diff[j] * k.eval(xi, xj);
        }
    }
    debug_assert!(total >= -1e-12, "population MMD^2 = {total}");
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[&[f64]]) -> SampleBatch {
        SampleBatch::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn tv_examples() {
        assert_eq!(total_variation(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(total_variation(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!((total_variation(&[0.5, 0.5], &[0.75, 0.25]).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(
            total_variation(&[1.0], &[0.5, 0.5]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn policy_discrepancy_examples() {
        let a = Policy::from_rows(&[vec![0.6, 0.4]]).unwrap();
        let b = Policy::from_rows(&[vec![0.4, 0.6]]).unwrap();
        assert_eq!(policy_discrepancy(&a, &a, 0).unwrap(), 0.0);
        assert!((policy_discrepancy(&a, &b, 0).unwrap() - 0.4).abs() < 1e-15);
        let d0 = Policy::deterministic(2, &[0]).unwrap();
        let d1 = Policy::deterministic(2, &[1]).unwrap();
        assert_eq!(policy_discrepancy(&d0, &d1, 0).unwrap(), 2.0);
        assert!(matches!(
            policy_discrepancy(&a, &b, 1),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    fn path_metric(n: usize) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                d[(i, j)] = (i as f64 - j as f64).abs();
            }
        }
        d
    }

    #[test]
    fn w1_examples() {
        let p = [0.2, 0.5, 0.3];
        assert!(wasserstein1_discrete(&p, &p, &path_metric(3)).unwrap().abs() < 1e-12);
        assert!((wasserstein1_discrete(&[1.0, 0.0], &[0.0, 1.0], &path_metric(2)).unwrap() - 1.0).abs() < 1e-12);
        let w = wasserstein1_discrete(&[0.5, 0.5, 0.0], &[0.0, 0.5, 0.5], &path_metric(3)).unwrap();
        assert!((w - 1.0).abs() < 1e-12, "{w}");
    }

    #[test]
    fn w1_path_example_matches_coupling_enumeration() {
        // Couplings of p = [.5,.5,0], q = [0,.5,.5] form a one-parameter family:
        // pi(0,1) = a, pi(0,2) = .5 - a, pi(1,1) = .5 - a, pi(1,2) = a.
        let cost = path_metric(3);
        let mut best = f64::INFINITY;
        for k in 0..=1000 {
            let a = 0.5 * k as f64 / 1000.0;
            let c = a * cost[(0, 1)] + (0.5 - a) * cost[(0, 2)] + (0.5 - a) * cost[(1, 1)] + a * cost[(1, 2)];
            best = best.min(c);
        }
        assert!((best - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metric_validation() {
        let mut d = path_metric(2);
        d[(0, 1)] = 2.0;
        assert!(wasserstein1_discrete(&[1.0, 0.0], &[0.0, 1.0], &d).is_err());
    }

    #[test]
    fn empirical_1d_examples() {
        assert_eq!(wasserstein1_empirical_1d(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(wasserstein1_empirical_1d(&[0.0, 2.0], &[3.0, 1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein1_empirical_1d(&[0.0], &[5.0]).unwrap(), 5.0);
        assert!(matches!(
            wasserstein1_empirical_1d(&[0.0], &[5.0, 1.0]),
            Err(Error::UnequalCounts(1, 2))
        ));
    }

    #[test]
    fn mmd_hand_example() {
        let k = KernelSpec::new(vec![0.5]).unwrap();
        let v = mmd2_unbiased(&batch(&[&[0.0], &[0.0]]), &batch(&[&[1.0], &[1.0]]), &k).unwrap();
        let expected = 2.0 - 2.0 * (-1.0_f64).exp();
        assert!((v - expected).abs() < 1e-12, "{v}");
    }

    #[test]
    fn mmd_identical_batches_nonpositive() {
        let h = batch(&[&[0.0, 1.0], &[0.3, -0.2], &[1.5, 0.4]]);
        let k = KernelSpec::new(vec![0.5, 2.0]).unwrap();
        let v = mmd2_unbiased(&h, &h, &k).unwrap();
        // analytic value: the cross term also contains the diagonal k(x,x) = 1
        let n = 3.0;
        let mut off = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    off += k.eval(h.row(i), h.row(j));
                }
            }
        }
        let analytic = 2.0 * off / (n * (n - 1.0)) - 2.0 * (off + n) / (n * n);
        assert!(v <= 1e-12);
        assert!((v - analytic).abs() < 1e-12);
    }

    #[test]
    fn mmd_mixture_is_mean_of_components() {
        let h0 = batch(&[&[0.0], &[0.4], &[1.0]]);
        let h1 = batch(&[&[2.0], &[0.1], &[0.9]]);
        let a = mmd2_unbiased(&h0, &h1, &KernelSpec::new(vec![0.3]).unwrap()).unwrap();
        let b = mmd2_unbiased(&h0, &h1, &KernelSpec::new(vec![3.0]).unwrap()).unwrap();
        let ab = mmd2_unbiased(&h0, &h1, &KernelSpec::new(vec![0.3, 3.0]).unwrap()).unwrap();
        assert!((ab - 0.5 * (a + b)).abs() < 1e-14);
    }

    #[test]
    fn mmd_rejects_tiny_batches() {
        let k = KernelSpec::new(vec![1.0]).unwrap();
        assert!(matches!(
            mmd2_unbiased(&batch(&[&[0.0]]), &batch(&[&[1.0], &[2.0]]), &k),
            Err(Error::BatchTooSmall { need: 2, got: 1 })
        ));
    }

    #[test]
    fn mmd_gradient_matches_finite_differences() {
        let h0 = batch(&[&[0.0, 0.2], &[0.4, -0.1], &[1.0, 0.3]]);
        let h1 = batch(&[&[2.0, 0.0], &[0.1, 0.5]]);
        let k = KernelSpec::new(vec![0.5, 2.0]).unwrap();
        let (v, g0, g1) = mmd2_unbiased_with_grad(&h0, &h1, &k).unwrap();
        assert!((v - mmd2_unbiased(&h0, &h1, &k).unwrap()).abs() < 1e-14);
        let step = 1e-6;
        for (which, grad) in [(0, &g0), (1, &g1)] {
            let base = if which == 0 { &h0 } else { &h1 };
            for idx in 0..base.as_slice().len() {
                let mut plus = base.as_slice().to_vec();
                let mut minus = plus.clone();
                plus[idx] += step;
                minus[idx] -= step;
                let (p, m) = (
                    SampleBatch::new(2, plus).unwrap(),
                    SampleBatch::new(2, minus).unwrap(),
                );
                let fd = if which == 0 {
                    (mmd2_unbiased(&p, &h1, &k).unwrap() - mmd2_unbiased(&m, &h1, &k).unwrap()) / (2.0 * step)
                } else {
                    (mmd2_unbiased(&h0, &p, &k).unwrap() - mmd2_unbiased(&h0, &m, &k).unwrap()) / (2.0 * step)
                };
                assert!((fd - grad[idx]).abs() < 1e-7, "{which}/{idx}: {fd} vs {}", grad[idx]);
            }
        }
    }

    #[test]
    fn population_examples() {
        let k = KernelSpec::new(vec![0.5]).unwrap();
        let pts = vec![vec![0.0], vec![1.0]];
        assert_eq!(mmd2_population(&[0.4, 0.6], &[0.4, 0.6], &pts, &k).unwrap(), 0.0);
        let v = mmd2_population(&[1.0, 0.0], &[0.0, 1.0], &pts, &k).unwrap();
        assert!((v - (2.0 - 2.0 * (-1.0_f64).exp())).abs() < 1e-14);
        let k2 = KernelSpec::new(vec![0.5, 4.0]).unwrap();
        let a = mmd2_population(&[0.7, 0.3], &[0.2, 0.8], &pts, &k).unwrap();
        let b = mmd2_population(&[0.7, 0.3], &[0.2, 0.8], &pts, &KernelSpec::new(vec![4.0]).unwrap()).unwrap();
        let ab = mmd2_population(&[0.7, 0.3], &[0.2, 0.8], &pts, &k2).unwrap();
        assert!((ab - 0.5 * (a + b)).abs() < 1e-14);
    }
}
