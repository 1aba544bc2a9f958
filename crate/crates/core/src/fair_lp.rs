//! Jointly optimal group policies under a return-parity constraint, solved
//! through the occupancy-measure dual LP.
//!
//! Variable layout of the LP built here: `rho0` (m*n, state-major), `rho1`
//! (m*n), then `b0`, `b1`; all nonnegative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::lp::{lp_solve, Direction, LpProblem, LpStatus, Sense};
use crate::mdp::{GroupPair, Mdp, Policy};
use crate::parity::return_disparity;

/// Occupancy rows with less mass than this recover to a uniform policy.
pub const ZERO_MASS: f64 = 1e-12;
const PRICE_TOL: f64 = 1e-9;

/// Row `i` of the discounted flow operator applied to an occupancy block:
/// `sum_a rho(i, a) - gamma * sum_{s,a} T(i | s, a) rho(s, a)`.
fn flow_row(mdp: &Mdp, i: usize) -> Vec<f64> {
    let (m, n) = (mdp.num_states(), mdp.num_actions());
    let mut row = vec![0.0; m * n];
    for s in 0..m {
        for a in 0..n {
            let mut v = -mdp.gamma() * mdp.transition(s, a, i);
            if s == i {
                v += 1.0;
            }
            row[s * n + a] = v;
        }
    }
    row
}

fn flow_residual(mdp: &Mdp, rho: &[f64], rhs: &[f64]) -> f64 {
    (0..mdp.num_states())
        .map(|i| {
            let lhs: f64 = flow_row(mdp, i).iter().zip(rho).map(|(a, b)| a * b).sum();
            (lhs - rhs[i]).abs()
        })
        .fold(0.0, f64::max)
}

/// Builds the dual LP. Returns `InvalidParameter` for a negative or
/// non-finite `epsilon`.
pub fn build_fair_lp(pair: &GroupPair, epsilon: f64) -> Result<LpProblem> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    let (m, n) = (pair.num_states(), pair.num_actions());
    let block = m * n;
    let nv = 2 * block + 2;
    let (b0, b1) = (2 * block, 2 * block + 1);

    let mut objective = vec![0.0; nv];
    for g in 0..2 {
        let mdp = pair.group(g);
        for s in 0..m {
            for a in 0..n {
                objective[g * block + s * n + a] = mdp.reward(s, a);
            }
        }
    }
    objective[b0] = -epsilon;
    objective[b1] = -epsilon;

    let mut lp = LpProblem::new(Direction::Maximize, objective);
    for g in 0..2 {
        let mdp = pair.group(g);
        let (own, other) = if g == 0 { (b0, b1) } else { (b1, b0) };
        for i in 0..m {
            let mut row = vec![0.0; nv];
            row[g * block..(g + 1) * block].copy_from_slice(&flow_row(mdp, i));
            // (weight + b_own - b_other) mu_i moved to the left-hand side
            row[own] = -mdp.mu()[i];
            row[other] = mdp.mu()[i];
            lp.add_constraint(&row, Sense::Eq, pair.group_weight(g) * mdp.mu()[i])?;
        }
    }
    Ok(lp)
}

/// Where the parity prices ended up at the optimum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceRegime {
    /// `b0 = b1 = 0`: occupancies are the groups' weighted discounted counts.
    Zero,
    /// `b0 = b1 > 0`.
    Balanced,
    /// `b0 != b1`: mass has shifted between groups, so the recovered
    /// policies carry no parity guarantee beyond `achieved_disparity`.
    Unbalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairLpSolution {
    pub status: LpStatus,
    pub epsilon: f64,
    pub rho0: Option<DenseMatrix>,
    pub rho1: Option<DenseMatrix>,
    pub b0: Option<f64>,
    pub b1: Option<f64>,
    pub objective: Option<f64>,
    pub pi0: Option<Policy>,
    pub pi1: Option<Policy>,
    /// Exact disparity of the recovered policies.
    pub achieved_disparity: Option<f64>,
    /// Largest absolute flow-balance residual over both groups.
    pub max_flow_residual: Option<f64>,
    pub regime: Option<PriceRegime>,
}

impl FairLpSolution {
    fn without_optimum(status: LpStatus, epsilon: f64) -> Self {
        Self {
            status,
            epsilon,
            rho0: None,
            rho1: None,
            b0: None,
            b1: None,
            objective: None,
            pi0: None,
            pi1: None,
            achieved_disparity: None,
            max_flow_residual: None,
            regime: None,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }

    /// True when the recovered pair is within `epsilon` (plus `tol`).
    pub fn satisfies_parity(&self, tol: f64) -> bool {
        self.achieved_disparity.is_some_and(|d| d <= self.epsilon + tol)
    }
}

/// Normalizes occupancy rows into a policy; rows without mass become uniform.
pub fn recover_policy(rho: &DenseMatrix) -> Result<Policy> {
    let (m, n) = (rho.rows(), rho.cols());
    let mut probs = Vec::with_capacity(m * n);
    for s in 0..m {
        let row = rho.row(s);
        let mass: f64 = row.iter().map(|v| v.max(0.0)).sum();
        if mass <= ZERO_MASS {
            probs.extend(std::iter::repeat_n(1.0 / n as f64, n));
        } else {
            probs.extend(row.iter().map(|v| v.max(0.0) / mass));
        }
    }
    Policy::new(m, n, probs)
}

pub fn solve_fair(pair: &GroupPair, epsilon: f64) -> Result<FairLpSolution> {
    let lp = build_fair_lp(pair, epsilon)?;
    let out = lp_solve(&lp)?;
    if out.status != LpStatus::Optimal {
        return Ok(FairLpSolution::without_optimum(out.status, epsilon));
    }
    let x = out.x.expect("optimal outcome carries a point");
    let (m, n) = (pair.num_states(), pair.num_actions());
    let block = m * n;
    let rho0 = DenseMatrix::new(m, n, x[..block].iter().map(|v| v.max(0.0)).collect())?;
    let rho1 = DenseMatrix::new(m, n, x[block..2 * block].iter().map(|v| v.max(0.0)).collect())?;
    let (b0, b1) = (x[2 * block].max(0.0), x[2 * block + 1].max(0.0));

    let rhs = |g: usize, own: f64, other: f64| -> Vec<f64> {
        pair.group(g)
            .mu()
            .iter()
            .map(|u| (pair.group_weight(g) + own - other) * u)
            .collect()
    };
    let residual = flow_residual(&pair.mdp0, rho0.as_slice(), &rhs(0, b0, b1))
        .max(flow_residual(&pair.mdp1, rho1.as_slice(), &rhs(1, b1, b0)));

    let pi0 = recover_policy(&rho0)?;
    let pi1 = recover_policy(&rho1)?;
    let achieved = return_disparity(pair, &pi0, &pi1)?;
    let regime = if (b0 - b1).abs() > PRICE_TOL {
        PriceRegime::Unbalanced
    } else if b0.max(b1) > PRICE_TOL {
        PriceRegime::Balanced
    } else {
        PriceRegime::Zero
    };
    Ok(FairLpSolution {
        status: LpStatus::Optimal,
        epsilon,
        rho0: Some(rho0),
        rho1: Some(rho1),
        b0: Some(b0),
        b1: Some(b1),
        objective: out.value,
        pi0: Some(pi0),
        pi1: Some(pi1),
        achieved_disparity: Some(achieved),
        max_flow_residual: Some(residual),
        regime: Some(regime),
    })
}

/// Evidence that the groups' individually optimal returns differ by more
/// than epsilon: a feasible occupancy for the `leader` and a feasible value
/// upper bound for the other group whose objective gap exceeds epsilon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop3Certificate {
    pub leader: usize,
    /// Discounted state-action counts of the leader (m x n).
    pub occupancy: DenseMatrix,
    /// Value vector dominating the trailer's Bellman optimality operator.
    pub value_bound: Vec<f64>,
    /// `<r_leader, occupancy> - <mu_trailer, value_bound>`.
    pub gap: f64,
}

impl Prop3Certificate {
    /// Re-checks feasibility by substitution and that the gap exceeds `epsilon`.
    pub fn verify(&self, pair: &GroupPair, epsilon: f64, tol: f64) -> bool {
        let lead = pair.group(self.leader);
        let trail = pair.group(1 - self.leader);
        let (m, n) = (pair.num_states(), pair.num_actions());
        if self.occupancy.rows() != m || self.occupancy.cols() != n || self.value_bound.len() != m {
            return false;
        }
        if self.occupancy.as_slice().iter().any(|v| *v < -tol) {
            return false;
        }
        if flow_residual(lead, self.occupancy.as_slice(), lead.mu()) > tol {
            return false;
        }
        for s in 0..m {
            for a in 0..n {
                let next: f64 = trail
                    .transition_row(s, a)
                    .iter()
                    .zip(&self.value_bound)
                    .map(|(p, v)| p * v)
                    .sum();
                if self.value_bound[s] - trail.gamma() * next < trail.reward(s, a) - tol {
                    return false;
                }
            }
        }
        let mut lead_value = 0.0;
        for s in 0..m {
            for a in 0..n {
                lead_value += lead.reward(s, a) * self.occupancy[(s, a)];
            }
        }
        let trail_bound: f64 = trail.mu().iter().zip(&self.value_bound).map(|(u, v)| u * v).sum();
        let gap = lead_value - trail_bound;
        (gap - self.gap).abs() <= tol * (1.0 + gap.abs()) && gap > epsilon
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop3Outcome {
    pub holds: bool,
    /// Optimal `eta*_g - eta*_h` for (leader 0, leader 1).
    pub gaps: [f64; 2],
    pub certificate: Option<Prop3Certificate>,
}

/// `max <r_g, rho> - <mu_h, V>` over feasible counts of group `g` and value
/// upper bounds of group `h`. The optimum is the gap between the two groups'
/// optimal returns.
fn leader_gap(pair: &GroupPair, g: usize) -> Result<(f64, Vec<f64>)> {
    let (lead, trail) = (pair.group(g), pair.group(1 - g));
    let (m, n) = (pair.num_states(), pair.num_actions());
    let block = m * n;
    let mut objective = vec![0.0; block + m];
    for s in 0..m {
        for a in 0..n {
            objective[s * n + a] = lead.reward(s, a);
        }
        objective[block + s] = -trail.mu()[s];
    }
    let mut lp = LpProblem::new(Direction::Maximize, objective);
    for i in 0..m {
        let mut row = flow_row(lead, i);
        row.extend(std::iter::repeat_n(0.0, m));
        lp.add_constraint(&row, Sense::Eq, lead.mu()[i])?;
    }
    for s in 0..m {
        for a in 0..n {
            let mut row = vec![0.0; block + m];
            for (sp, p) in trail.transition_row(s, a).iter().enumerate() {
                row[block + sp] -= trail.gamma() * p;
            }
            row[block + s] += 1.0;
            lp.add_constraint(&row, Sense::Ge, trail.reward(s, a))?;
        }
    }
    for s in 0..m {
        lp.set_bounds(block + s, None, None)?;
    }
    let out = lp_solve(&lp)?;
    match out.status {
        LpStatus::Optimal => Ok((out.value.unwrap_or(0.0), out.x.unwrap_or_default())),
        s => Err(Error::LpStatus(format!("optimal-return gap LP returned {s:?}"))),
    }
}

/// Whether the groups' individually optimal policies already satisfy
/// `epsilon`-return parity; decided by two LPs (one per leading group).
pub fn check_prop3(pair: &GroupPair, epsilon: f64) -> Result<Prop3Outcome> {
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::InvalidParameter(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let (m, n) = (pair.num_states(), pair.num_actions());
    let mut gaps = [0.0; 2];
    let mut certificate = None;
    for g in 0..2 {
        let (gap, x) = leader_gap(pair, g)?;
        gaps[g] = gap;
        if gap > epsilon + 1e-9 && certificate.is_none() {
            certificate = Some(Prop3Certificate {
                leader: g,
                occupancy: DenseMatrix::new(m, n, x[..m * n].iter().map(|v| v.max(0.0)).collect())?,
                value_bound: x[m * n..].to_vec(),
                gap,
            });
        }
    }
    Ok(Prop3Outcome {
        holds: certificate.is_none(),
        gaps,
        certificate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::random_mdp;
    use crate::parity::prop1_counterexample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_state_pair(r: f64, gamma: f64, lambda: f64) -> GroupPair {
        let mdp = Mdp::new(1, 1, gamma, vec![1.0], vec![1.0], vec![r]).unwrap();
        GroupPair::new(mdp.clone(), mdp, lambda).unwrap()
    }

    #[test]
    fn lp_shape() {
        let lp = build_fair_lp(&single_state_pair(1.0, 0.5, 0.5), 0.0).unwrap();
        assert_eq!(lp.num_vars(), 4);
        assert_eq!(lp.num_constraints(), 2);
        assert!(lp.senses().iter().all(|s| *s == Sense::Eq));
        assert!(matches!(
            build_fair_lp(&single_state_pair(1.0, 0.5, 0.5), -0.1),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn single_state_objective() {
        let sol = solve_fair(&single_state_pair(1.0, 0.5, 0.5), 0.0).unwrap();
        assert!(sol.is_optimal());
        assert!((sol.objective.unwrap() - 2.0).abs() < 1e-9);
        assert!(sol.max_flow_residual.unwrap() < 1e-9);
    }

    /// Optimal return of one MDP by enumerating deterministic policies.
    fn best_return(mdp: &Mdp) -> f64 {
        let (m, n) = (mdp.num_states(), mdp.num_actions());
        let mut best = f64::NEG_INFINITY;
        for code in 0..n.pow(m as u32) {
            let actions: Vec<usize> = (0..m).map(|s| (code / n.pow(s as u32)) % n).collect();
            let pi = Policy::deterministic(n, &actions).unwrap();
            best = best.max(mdp.expected_return(&pi).unwrap());
        }
        best
    }

    #[test]
    fn prop3_gaps_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pair = GroupPair::new(
                random_mdp(3, 2, 0.9, &mut rng).unwrap(),
                random_mdp(3, 2, 0.9, &mut rng).unwrap(),
                0.5,
            )
            .unwrap();
            let (e0, e1) = (best_return(&pair.mdp0), best_return(&pair.mdp1));
            let out = check_prop3(&pair, 0.0).unwrap();
            assert!((out.gaps[0] - (e0 - e1)).abs() < 1e-7);
            assert!((out.gaps[1] - (e1 - e0)).abs() < 1e-7);
            let big = check_prop3(&pair, 1e6).unwrap();
            assert!(big.holds);
        }
    }

    #[test]
    fn prop3_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mdp = random_mdp(3, 2, 0.9, &mut rng).unwrap();
        let same = GroupPair::new(mdp.clone(), mdp, 0.3).unwrap();
        assert!(check_prop3(&same, 0.0).unwrap().holds);

        let pair = prop1_counterexample(4.0, 0.9).unwrap();
        let out = check_prop3(&pair, 2.0).unwrap();
        assert!(!out.holds);
        let cert = out.certificate.unwrap();
        assert_eq!(cert.leader, 0);
        assert!((cert.gap - 4.0).abs() < 1e-7);
        assert!(cert.verify(&pair, 2.0, 1e-7));
        assert!(!cert.verify(&pair, 5.0, 1e-7));
    }

    #[test]
    fn uniform_fallback_on_empty_rows() {
        let rho = DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![0.2, 0.6]]).unwrap();
        let pi = recover_policy(&rho).unwrap();
        assert_eq!(pi.row(0), &[0.5, 0.5]);
        assert!((pi.prob(1, 1) - 0.75).abs() < 1e-15);
    }
}
