//! Return disparity between two groups, its decomposition bounds, and
//! structural checks on when exact parity is reachable.

use serde::{Deserialize, Serialize};

use crate::divergence::{discrete_metric, policy_discrepancy, validate_metric, wasserstein1_discrete};
use crate::error::{Error, Result};
use crate::linalg::{norm_l1, DenseMatrix};
use crate::lp::{lp_solve, Direction, LpProblem, LpStatus, Sense};
use crate::mdp::{GroupPair, Mdp, Policy};

const ASSUMPTION_TOL: f64 = 1e-9;
const LIPSCHITZ_TOL: f64 = 1e-9;

/// Function class used for the distribution-distance terms of the bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Witness {
    /// `{f : |f|_inf <= R}`; the distance is `R |p - q|_1`. Always valid.
    SupNormBall,
    /// `{f : Lip(f) <= constant}` under a ground metric on states. The
    /// distance is `constant * W1`. For state-action distributions the
    /// pair metric is `metric(s, s') + [a != a']`.
    Lipschitz { constant: f64, metric: DenseMatrix },
}

impl Witness {
    /// Lipschitz witness under the 0/1 metric.
    pub fn lipschitz_discrete(constant: f64, num_states: usize) -> Self {
        Witness::Lipschitz {
            constant,
            metric: discrete_metric(num_states),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Bound {
    pub reward_gap_term: f64,
    pub policy_term: f64,
    /// `E_{s ~ mu^{pi0}} |pi0(.|s) - pi1(.|s)|_1`, unscaled.
    pub policy_expectation_under_pi0: f64,
    /// Same expectation under `mu^{pi1}`.
    pub policy_expectation_under_pi1: f64,
    pub visitation_ipm_term: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Bound {
    pub reward_gap_term: f64,
    pub occupancy_ipm_term: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityReport {
    pub delta_ret: f64,
    pub return0: f64,
    pub return1: f64,
    pub bound_thm1: Theorem1Bound,
    pub bound_thm2: Theorem2Bound,
    pub witness: Witness,
}

fn check_policies(pair: &GroupPair, pi0: &Policy, pi1: &Policy) -> Result<()> {
    for pi in [pi0, pi1] {
        if pi.num_states() != pair.num_states() || pi.num_actions() != pair.num_actions() {
            return Err(Error::DimensionMismatch(format!(
                "policy is {}x{}, pair is {}x{}",
                pi.num_states(),
                pi.num_actions(),
                pair.num_states(),
                pair.num_actions()
            )));
        }
    }
    Ok(())
}

/// `|eta_0^{pi0} - eta_1^{pi1}|`.
pub fn return_disparity(pair: &GroupPair, pi0: &Policy, pi1: &Policy) -> Result<f64> {
    check_policies(pair, pi0, pi1)?;
    Ok((pair.mdp0.expected_return(pi0)? - pair.mdp1.expected_return(pi1)?).abs())
}

fn reward_sup_gap(pair: &GroupPair) -> f64 {
    let (m, n) = (pair.num_states(), pair.num_actions());
    let mut gap = 0.0_f64;
    for s in 0..m {
        for a in 0..n {
            gap = gap.max((pair.mdp0.reward(s, a) - pair.mdp1.reward(s, a)).abs());
        }
    }
    gap
}

fn lipschitz_violation(f: &[f64], metric: &DenseMatrix, constant: f64) -> Option<(usize, usize)> {
    for i in 0..f.len() {
        for j in i + 1..f.len() {
            if (f[i] - f[j]).abs() > constant * metric[(i, j)] + LIPSCHITZ_TOL {
                return Some((i, j));
            }
        }
    }
    None
}

fn pair_metric(metric: &DenseMatrix, n: usize) -> DenseMatrix {
    let m = metric.rows();
    let mut d = DenseMatrix::zeros(m * n, m * n);
    for s in 0..m {
        for a in 0..n {
            for t in 0..m {
                for b in 0..n {
                    d[(s * n + a, t * n + b)] = metric[(s, t)] + if a == b { 0.0 } else { 1.0 };
                }
            }
        }
    }
    d
}

fn check_witness(w: &Witness, m: usize) -> Result<()> {
    if let Witness::Lipschitz { constant, metric } = w {
        if !(constant.is_finite() && *constant >= 0.0) {
            return Err(Error::InvalidParameter(format!("Lipschitz constant {constant}")));
        }
        validate_metric(metric, m)?;
    }
    Ok(())
}

/// Three-term decomposition over reward gap, policy discrepancy, and
/// state-visitation distance.
pub fn bound_theorem1(pair: &GroupPair, pi0: &Policy, pi1: &Policy, witness: &Witness) -> Result<Theorem1Bound> {
    check_policies(pair, pi0, pi1)?;
    let m = pair.num_states();
    check_witness(witness, m)?;
    let scale = 1.0 / (1.0 - pair.gamma());
    let r_bound = pair.reward_bound();
    let mu0 = pair.mdp0.state_visitation(pi0)?;
    let mu1 = pair.mdp1.state_visitation(pi1)?;

    let mut e0 = 0.0;
    let mut e1 = 0.0;
    for s in 0..m {
        let d = policy_discrepancy(pi0, pi1, s)?;
        e0 += mu0[s] * d;
        e1 += mu1[s] * d;
    }

    let visitation = match witness {
        Witness::SupNormBall => {
            let diff: Vec<f64> = mu0.iter().zip(&mu1).map(|(a, b)| a - b).collect();
            r_bound * norm_l1(&diff)
        }
        Witness::Lipschitz { constant, metric } => {
            // The proof pairs the visitation distance with group 1's reward
            // averaged under pi1 (or pi0 for the mirrored branch).
            for (name, pi) in [("pi1", pi1), ("pi0", pi0)] {
                let f = pair.mdp1.induced_reward(pi)?;
                if let Some((i, j)) = lipschitz_violation(&f, metric, *constant) {
                    return Err(Error::WitnessPreconditionViolated(format!(
                        "group-1 reward under {name} is not {constant}-Lipschitz between states {i} and {j}"
                    )));
                }
            }
            constant * wasserstein1_discrete(&mu0, &mu1, metric)?
        }
    };

    let reward_gap_term = scale * reward_sup_gap(pair);
    let policy_term = scale * r_bound * e0.min(e1);
    let visitation_ipm_term = scale * visitation;
    Ok(Theorem1Bound {
        reward_gap_term,
        policy_term,
        policy_expectation_under_pi0: e0,
        policy_expectation_under_pi1: e1,
        visitation_ipm_term,
        total: reward_gap_term + policy_term + visitation_ipm_term,
    })
}

/// Two-term decomposition over reward gap and occupancy-measure distance.
pub fn bound_theorem2(pair: &GroupPair, pi0: &Policy, pi1: &Policy, witness: &Witness) -> Result<Theorem2Bound> {
    check_policies(pair, pi0, pi1)?;
    let (m, n) = (pair.num_states(), pair.num_actions());
    check_witness(witness, m)?;
    let scale = 1.0 / (1.0 - pair.gamma());
    let rho0 = pair.mdp0.occupancy_measure(pi0)?;
    let rho1 = pair.mdp1.occupancy_measure(pi1)?;

    let ipm = match witness {
        Witness::SupNormBall => pair.reward_bound() * norm_l1(rho0.sub_scaled(&rho1, 1.0)?.as_slice()),
        Witness::Lipschitz { constant, metric } => {
            let d = pair_metric(metric, n);
            // Either group's reward may serve as the witness function.
            let flat = |mdp: &Mdp| -> Vec<f64> { (0..m).flat_map(|s| mdp.reward_row(s).to_vec()).collect() };
            let r1 = flat(&pair.mdp1);
            let r0 = flat(&pair.mdp0);
            if let (Some((i, j)), Some(_)) = (
                lipschitz_violation(&r1, &d, *constant),
                lipschitz_violation(&r0, &d, *constant),
            ) {
                return Err(Error::WitnessPreconditionViolated(format!(
                    "neither group's reward is {constant}-Lipschitz (pairs {i}, {j})"
                )));
            }
            constant * wasserstein1_discrete(rho0.as_slice(), rho1.as_slice(), &d)?
        }
    };

    let reward_gap_term = scale * reward_sup_gap(pair);
    let occupancy_ipm_term = scale * ipm;
    Ok(Theorem2Bound {
        reward_gap_term,
        occupancy_ipm_term,
        total: reward_gap_term + occupancy_ipm_term,
    })
}

/// Disparity plus both bounds.
pub fn analyze(pair: &GroupPair, pi0: &Policy, pi1: &Policy, witness: &Witness) -> Result<DisparityReport> {
    check_policies(pair, pi0, pi1)?;
    let return0 = pair.mdp0.expected_return(pi0)?;
    let return1 = pair.mdp1.expected_return(pi1)?;
    Ok(DisparityReport {
        delta_ret: (return0 - return1).abs(),
        return0,
        return1,
        bound_thm1: bound_theorem1(pair, pi0, pi1, witness)?,
        bound_thm2: bound_theorem2(pair, pi0, pi1, witness)?,
        witness: witness.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Outcome {
    /// No direction `c` orthogonal to the ones vector is strictly positive on
    /// every transition difference.
    pub holds: bool,
    /// Maximizing direction; present only when `holds` is false.
    pub witness_c: Option<Vec<f64>>,
    /// Optimal `min_ij <c, d_ij>` over the box.
    pub margin: f64,
}

fn assumption(name: &str, detail: String) -> Error {
    Error::AssumptionViolated {
        assumption: name.into(),
        detail,
    }
}

fn check_prop2_assumptions(pair: &GroupPair) -> Result<()> {
    let (m, n) = (pair.num_states(), pair.num_actions());
    for s in 0..m {
        for a in 0..n {
            let (r0, r1) = (pair.mdp0.reward(s, a), pair.mdp1.reward(s, a));
            if (r0 - r1).abs() > ASSUMPTION_TOL {
                return Err(assumption(
                    "shared reward",
                    format!("r0({s},{a}) = {r0} but r1({s},{a}) = {r1}"),
                ));
            }
            let base = pair.mdp0.reward(s, 0);
            if (r0 - base).abs() > ASSUMPTION_TOL {
                return Err(assumption(
                    "state-only reward",
                    format!("r({s},{a}) = {r0} differs from r({s},0) = {base}"),
                ));
            }
        }
        let (u0, u1) = (pair.mdp0.mu()[s], pair.mdp1.mu()[s]);
        if (u0 - u1).abs() > ASSUMPTION_TOL {
            return Err(assumption(
                "shared initial distribution",
                format!("mu0[{s}] = {u0} but mu1[{s}] = {u1}"),
            ));
        }
    }
    Ok(())
}

/// Transition differences `d_ij[k] = T0(k | a_i, s_j) - T1(k | a_i, s_j)`,
/// indexed by `(action i, state j)`.
pub fn transition_differences(pair: &GroupPair) -> Vec<Vec<f64>> {
    let (m, n) = (pair.num_states(), pair.num_actions());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..n {
        for j in 0..m {
            out.push(
                pair.mdp0
                    .transition_row(j, i)
                    .iter()
                    .zip(pair.mdp1.transition_row(j, i))
                    .map(|(a, b)| a - b)
                    .collect(),
            );
        }
    }
    out
}

/// Decides whether some direction `c` (orthogonal to the ones vector,
/// `|c|_inf <= 1`) has `<c, d_ij> > 0` for every transition difference.
/// If none does, parity with zero tolerance is reachable under the shared
/// reward and initial distribution.
pub fn check_prop2(pair: &GroupPair) -> Result<Prop2Outcome> {
    check_prop2_assumptions(pair)?;
    let m = pair.num_states();
    // variables: c_0..c_{m-1}, t
    let mut objective = vec![0.0; m + 1];
    objective[m] = 1.0;
    let mut lp = LpProblem::new(Direction::Maximize, objective);
    for d in transition_differences(pair) {
        let mut row = d.clone();
        row.push(-1.0);
        lp.add_constraint(&row, Sense::Ge, 0.0)?;
    }
    let mut ones = vec![1.0; m + 1];
    ones[m] = 0.0;
    lp.add_constraint(&ones, Sense::Eq, 0.0)?;
    for k in 0..m {
        lp.set_bounds(k, Some(-1.0), Some(1.0))?;
    }
    lp.set_bounds(m, None, None)?;
    let out = lp_solve(&lp)?;
    if out.status != LpStatus::Optimal {
        return Err(Error::LpStatus(format!("direction LP returned {:?}", out.status)));
    }
    let x = out.x.unwrap_or_default();
    let margin = x[m];
    let holds = margin <= 1e-9;
    Ok(Prop2Outcome {
        holds,
        witness_c: (!holds).then(|| x[..m].to_vec()),
        margin: if holds { margin.max(0.0) } else { margin },
    })
}

/// Two absorbing states; group 0 starts in the rewarding one, group 1 in the
/// other. Every policy pair has disparity exactly `c`.
pub fn prop1_counterexample(c: f64, gamma: f64) -> Result<GroupPair> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidParameter(format!("c must be positive, got {c}")));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidParameter(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    let r = c * (1.0 - gamma);
    let transition = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
    let reward = vec![r, r, 0.0, 0.0];
    let mdp0 = Mdp::new(2, 2, gamma, vec![1.0, 0.0], transition.clone(), reward.clone())?;
    let mdp1 = Mdp::new(2, 2, gamma, vec![0.0, 1.0], transition, reward)?;
    GroupPair::new(mdp0, mdp1, 0.5)
}
