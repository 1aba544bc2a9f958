//! Principal components by power iteration with deflation.
//!
//! Each component's sign is fixed so its first nonzero coordinate is
//! positive, which keeps projections reproducible across runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TOLERANCE: f64 = 1e-9;
pub const MAX_ITERATIONS: usize = 10_000;
/// Pooled variance below this is rejected as degenerate.
pub const MIN_TOTAL_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm components, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Variance of the data along each component.
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
    /// Whether each component met the tolerance before the iteration cap.
    pub converged: Vec<bool>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

fn fix_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-15) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Unit vector orthogonal to `basis`, taken from the standard basis.
fn complement(dim: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    let mut best = vec![0.0; dim];
    let mut best_norm = -1.0;
    for j in 0..dim {
        let mut v = vec![0.0; dim];
        v[j] = 1.0;
        orthogonalize(&mut v, basis);
        let n = norm(&v);
        if n > best_norm + 1e-12 {
            best_norm = n;
            best = v;
        }
    }
    let n = norm(&best);
    best.iter_mut().for_each(|x| *x /= n);
    best
}

impl Pca {
    /// Fits `k` components to the rows of `data` (all of equal length).
    pub fn fit(data: &[Vec<f64>], k: usize) -> Result<Self> {
        let n = data.len();
        if n < 2 {
            return Err(Error::BatchTooSmall { need: 2, got: n });
        }
        let dim = data[0].len();
        if dim == 0 {
            return Err(Error::DimensionMismatch("zero-dimensional rows".into()));
        }
        if let Some(i) = data.iter().position(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch(format!(
                "row {i} has length {}, expected {dim}",
                data[i].len()
            )));
        }
        if k == 0 || k > dim {
            return Err(Error::InvalidParameter(format!("cannot extract {k} components from dimension {dim}")));
        }
        let mut mean = vec![0.0; dim];
        for r in data {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; dim * dim];
        for r in data {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..dim {
                for j in i..dim {
                    cov[i * dim + j] += c[i] * c[j];
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let v = cov[i * dim + j] / (n - 1) as f64;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        let total_variance: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
        if !total_variance.is_finite() {
            return Err(Error::NonFinite("PCA input".into()));
        }
        if total_variance < MIN_TOTAL_VARIANCE {
            return Err(Error::DegenerateData(total_variance));
        }

        let matvec = |m: &[f64], v: &[f64]| -> Vec<f64> { (0..dim).map(|i| dot(&m[i * dim..(i + 1) * dim], v)).collect() };
        let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut explained = Vec::with_capacity(k);
        let mut converged = Vec::with_capacity(k);
        for _ in 0..k {
            // deterministic start with weight on every coordinate
            let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + 0.1 * i as f64).collect();
            orthogonalize(&mut v, &components);
            let mut done = false;
            if norm(&v) < 1e-12 {
                v = complement(dim, &components);
            } else {
                let nv = norm(&v);
                v.iter_mut().for_each(|x| *x /= nv);
            }
            for _ in 0..MAX_ITERATIONS {
                let mut w = matvec(&cov, &v);
                orthogonalize(&mut w, &components);
                let nw = norm(&w);
                if nw < 1e-300 {
                    // remaining spectrum is zero: any orthogonal direction works
                    v = complement(dim, &components);
                    done = true;
                    break;
                }
                w.iter_mut().for_each(|x| *x /= nw);
                let delta = norm(&w.iter().zip(&v).map(|(a, b)| a - b).collect::<Vec<_>>());
                v = w;
                if delta < TOLERANCE {
                    done = true;
                    break;
                }
            }
            fix_sign(&mut v);
            let lambda = dot(&v, &matvec(&cov, &v)).max(0.0);
            // deflate
            for i in 0..dim {
                for j in 0..dim {
                    cov[i * dim + j] -= lambda * v[i] * v[j];
                }
            }
            components.push(v);
            explained.push(lambda);
            converged.push(done);
        }
        Ok(Self {
            mean,
            components,
            explained_variance: explained,
            total_variance,
            converged,
        })
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "point of length {}, expected {}",
                x.len(),
                self.mean.len()
            )));
        }
        let c: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self.components.iter().map(|v| dot(v, &c)).collect())
    }

    pub fn explained_ratio(&self) -> Vec<f64> {
        self.explained_variance.iter().map(|v| v / self.total_variance).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub pc1: f64,
    pub pc2: f64,
    pub group: usize,
}

/// Pools the groups' points, fits two components, and projects every point.
pub fn project_groups(groups: &[Vec<Vec<f64>>]) -> Result<(Pca, Vec<ProjectedPoint>)> {
    let pooled: Vec<Vec<f64>> = groups.iter().flatten().cloned().collect();
    let dim = pooled.first().map_or(0, |r| r.len());
    let pca = Pca::fit(&pooled, dim.min(2))?;
    let mut out = Vec::with_capacity(pooled.len());
    for (g, rows) in groups.iter().enumerate() {
        for r in rows {
            let p = pca.project(r)?;
            out.push(ProjectedPoint {
                pc1: p[0],
                pc2: p.get(1).copied().unwrap_or(0.0),
                group: g,
            });
        }
    }
    Ok((pca, out))
}
