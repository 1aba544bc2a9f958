//! Finite MDPs, stochastic policies, and exact evaluation: induced transitions,
//! values, discounted state visitation, occupancy measures, and returns.
//!
//! Transition tensors are stored row-major as `T[s][a][s']`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, lu_solve, DenseMatrix};

/// Tolerance for stochasticity checks on construction.
pub const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    mu: Vec<f64>,
    transition: Vec<f64>,
    reward: Vec<f64>,
    reward_bound: f64,
}

/// On-disk MDP document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    pub mu: Vec<f64>,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
}

fn check_distribution(what: &str, p: &[f64]) -> Result<()> {
    if let Some(i) = p.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Validation(format!(
            "{what}: entry {i} = {} is negative or non-finite",
            p[i]
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::Validation(format!("{what}: sums to {s}, expected 1")));
    }
    Ok(())
}

impl Mdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        mu: Vec<f64>,
        transition: Vec<f64>,
        reward: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::Validation("need at least one state and one action".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Validation(format!("gamma = {gamma} must lie in (0, 1)")));
        }
        let (m, n) = (num_states, num_actions);
        if mu.len() != m {
            return Err(Error::DimensionMismatch(format!("mu has {} entries, expected {m}", mu.len())));
        }
        if transition.len() != m * n * m {
            return Err(Error::DimensionMismatch(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                m * n * m
            )));
        }
        if reward.len() != m * n {
            return Err(Error::DimensionMismatch(format!(
                "reward has {} entries, expected {}",
                reward.len(),
                m * n
            )));
        }
        check_distribution("mu", &mu)?;
        for s in 0..m {
            for a in 0..n {
                let row = &transition[(s * n + a) * m..(s * n + a + 1) * m];
                check_distribution(&format!("transition row (state {s}, action {a})"), row)?;
            }
        }
        if let Some(i) = reward.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "reward (state {}, action {}) is not finite",
                i / n,
                i % n
            )));
        }
        let reward_bound = reward.iter().fold(0.0_f64, |b, r| b.max(r.abs()));
        Ok(Self {
            num_states,
            num_actions,
            gamma,
            mu,
            transition,
            reward,
            reward_bound,
        })
    }

    pub fn from_file_repr(f: MdpFile) -> Result<Self> {
        let (m, n) = (f.num_states, f.num_actions);
        if f.transition.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "transition has {} state blocks, expected {m}",
                f.transition.len()
            )));
        }
        let mut t = Vec::with_capacity(m * n * m);
        for (s, block) in f.transition.iter().enumerate() {
            if block.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "transition[{s}] has {} actions, expected {n}",
                    block.len()
                )));
            }
            for (a, row) in block.iter().enumerate() {
                if row.len() != m {
                    return Err(Error::DimensionMismatch(format!(
                        "transition[{s}][{a}] has {} entries, expected {m}",
                        row.len()
                    )));
                }
                t.extend_from_slice(row);
            }
        }
        if f.reward.len() != m || f.reward.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch(format!("reward must be {m}x{n}")));
        }
        Self::new(m, n, f.gamma, f.mu, t, f.reward.concat())
    }

    pub fn to_file_repr(&self) -> MdpFile {
        let (m, n) = (self.num_states, self.num_actions);
        MdpFile {
            num_states: m,
            num_actions: n,
            gamma: self.gamma,
            mu: self.mu.clone(),
            transition: (0..m)
                .map(|s| (0..n).map(|a| self.transition_row(s, a).to_vec()).collect())
                .collect(),
            reward: (0..m).map(|s| self.reward_row(s).to_vec()).collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: MdpFile = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("line {} column {}: {e}", e.line(), e.column())))?;
        Self::from_file_repr(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// `max |r(s, a)|`.
    pub fn reward_bound(&self) -> f64 {
        self.reward_bound
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let (m, n) = (self.num_states, self.num_actions);
        &self.transition[(s * n + a) * m..(s * n + a + 1) * m]
    }

    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition_row(s, a)[next]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }

    pub fn reward_row(&self, s: usize) -> &[f64] {
        &self.reward[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn with_mu(&self, mu: Vec<f64>) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.gamma,
            mu,
            self.transition.clone(),
            self.reward.clone(),
        )
    }

    fn check_policy(&self, pi: &Policy) -> Result<()> {
        if pi.num_states != self.num_states || pi.num_actions != self.num_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy is {}x{}, MDP is {}x{}",
                pi.num_states, pi.num_actions, self.num_states, self.num_actions
            )));
        }
        Ok(())
    }

    /// `P^pi(s' | s) = sum_a pi(a|s) T(s'|s,a)`.
    pub fn induced_transition(&self, pi: &Policy) -> Result<DenseMatrix> {
        self.check_policy(pi)?;
        let m = self.num_states;
        let mut p = DenseMatrix::zeros(m, m);
        for s in 0..m {
            for (a, &w) in pi.row(s).iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (next, &t) in self.transition_row(s, a).iter().enumerate() {
                    p[(s, next)] += w * t;
                }
            }
        }
        Ok(p)
    }

    /// Expected one-step reward under `pi` in each state.
    pub fn induced_reward(&self, pi: &Policy) -> Result<Vec<f64>> {
        self.check_policy(pi)?;
        Ok((0..self.num_states)
            .map(|s| dot(pi.row(s), self.reward_row(s)))
            .collect())
    }

    /// Solves `(I - gamma P^pi) v = R^pi`.
    pub fn value_function(&self, pi: &Policy) -> Result<Vec<f64>> {
        let p = self.induced_transition(pi)?;
        let r = self.induced_reward(pi)?;
        let a = DenseMatrix::identity(self.num_states).sub_scaled(&p, self.gamma)?;
        lu_solve(&a, &r)
    }

    /// Discounted state visitation `(1-gamma) sum_t (gamma P^pi^T)^t mu`,
    /// computed through the linear system rather than the series.
    pub fn state_visitation(&self, pi: &Policy) -> Result<Vec<f64>> {
        let p = self.induced_transition(pi)?;
        let a = DenseMatrix::identity(self.num_states).sub_scaled(&p.transpose(), self.gamma)?;
        let rhs: Vec<f64> = self.mu.iter().map(|v| (1.0 - self.gamma) * v).collect();
        let mut x = lu_solve(&a, &rhs)?;
        // round-off can leave entries at -1e-17
        x.iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(x)
    }

    /// `rho(s, a) = mu^pi(s) pi(a|s)` as an `m x n` matrix.
    pub fn occupancy_measure(&self, pi: &Policy) -> Result<DenseMatrix> {
        let visit = self.state_visitation(pi)?;
        let (m, n) = (self.num_states, self.num_actions);
        let mut rho = DenseMatrix::zeros(m, n);
        for s in 0..m {
            for a in 0..n {
                rho[(s, a)] = visit[s] * pi.prob(s, a);
            }
        }
        Ok(rho)
    }

    /// `eta^pi = E_{s ~ mu}[v^pi(s)]`.
    pub fn expected_return(&self, pi: &Policy) -> Result<f64> {
        Ok(dot(&self.mu, &self.value_function(pi)?))
    }

    /// `(1/(1-gamma)) sum_{s,a} r(s,a) rho(s,a)`; agrees with [`Self::expected_return`].
    pub fn expected_return_from_occupancy(&self, pi: &Policy) -> Result<f64> {
        let rho = self.occupancy_measure(pi)?;
        Ok(dot(rho.as_slice(), &self.reward) / (1.0 - self.gamma))
    }

    /// `q(s,a) = r(s,a) + gamma sum_s' T(s'|s,a) v^pi(s')`.
    pub fn q_function(&self, pi: &Policy) -> Result<DenseMatrix> {
        let v = self.value_function(pi)?;
        let (m, n) = (self.num_states, self.num_actions);
        let mut q = DenseMatrix::zeros(m, n);
        for s in 0..m {
            for a in 0..n {
                q[(s, a)] = self.reward(s, a) + self.gamma * dot(self.transition_row(s, a), &v);
            }
        }
        Ok(q)
    }

    /// `max_s |v(s) - (R^pi(s) + gamma (P^pi v)(s))|`.
    pub fn bellman_residual(&self, pi: &Policy, v: &[f64]) -> Result<f64> {
        let p = self.induced_transition(pi)?;
        let r = self.induced_reward(pi)?;
        let pv = p.matvec(v)?;
        Ok((0..self.num_states)
            .map(|s| (v[s] - r[s] - self.gamma * pv[s]).abs())
            .fold(0.0, f64::max))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Policy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::Validation("empty policy".into()));
        }
        if probs.len() != num_states * num_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                num_states * num_actions
            )));
        }
        for s in 0..num_states {
            check_distribution(
                &format!("policy row {s}"),
                &probs[s * num_actions..(s + 1) * num_actions],
            )?;
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch("ragged policy rows".into()));
        }
        Self::new(rows.len(), n, rows.concat())
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Result<Self> {
        let m = actions.len();
        let mut probs = vec![0.0; m * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(Error::IndexOutOfRange {
                    index: a,
                    len: num_actions,
                });
            }
            probs[s * num_actions + a] = 1.0;
        }
        Self::new(m, num_actions, probs)
    }

    /// Random policy with rows drawn uniformly from the simplex.
    pub fn random<R: rand::Rng + ?Sized>(num_states: usize, num_actions: usize, rng: &mut R) -> Self {
        let mut probs = Vec::with_capacity(num_states * num_actions);
        for _ in 0..num_states {
            let raw: Vec<f64> = (0..num_actions)
                .map(|_| -(1.0 - rng.random::<f64>()).ln())
                .collect();
            let total: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / total));
        }
        Self {
            num_states,
            num_actions,
            probs,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.num_states).map(|s| self.row(s).to_vec()).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            if msg.contains("validation failed") || msg.contains("dimension mismatch") {
                Error::Validation(msg)
            } else {
                Error::Parse(format!("line {} column {}: {msg}", e.line(), e.column()))
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

impl TryFrom<Vec<Vec<f64>>> for Policy {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<Policy> for Vec<Vec<f64>> {
    fn from(p: Policy) -> Self {
        p.to_rows()
    }
}

/// Two group MDPs over shared state/action spaces and discount, with the
/// population share `lambda` of group 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPair {
    pub mdp0: Mdp,
    pub mdp1: Mdp,
    pub lambda: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupPairFile {
    pub lambda: f64,
    pub mdp0: MdpFile,
    pub mdp1: MdpFile,
}

impl GroupPair {
    pub fn new(mdp0: Mdp, mdp1: Mdp, lambda: f64) -> Result<Self> {
        if mdp0.num_states != mdp1.num_states || mdp0.num_actions != mdp1.num_actions {
            return Err(Error::DimensionMismatch(format!(
                "group MDPs are {}x{} and {}x{}",
                mdp0.num_states, mdp0.num_actions, mdp1.num_states, mdp1.num_actions
            )));
        }
        if mdp0.gamma != mdp1.gamma {
            return Err(Error::Validation(format!(
                "group discounts differ: {} vs {}",
                mdp0.gamma, mdp1.gamma
            )));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Validation(format!("lambda = {lambda} must lie in [0, 1]")));
        }
        Ok(Self { mdp0, mdp1, lambda })
    }

    pub fn group(&self, g: usize) -> &Mdp {
        if g == 0 {
            &self.mdp0
        } else {
            &self.mdp1
        }
    }

    pub fn group_weight(&self, g: usize) -> f64 {
        if g == 0 {
            self.lambda
        } else {
            1.0 - self.lambda
        }
    }

    pub fn num_states(&self) -> usize {
        self.mdp0.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.mdp0.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.mdp0.gamma
    }

    /// Reward bound shared by both groups.
    pub fn reward_bound(&self) -> f64 {
        self.mdp0.reward_bound.max(self.mdp1.reward_bound)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: GroupPairFile = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("line {} column {}: {e}", e.line(), e.column())))?;
        Self::new(
            Mdp::from_file_repr(f.mdp0)?,
            Mdp::from_file_repr(f.mdp1)?,
            f.lambda,
        )
    }

    pub fn to_file_repr(&self) -> GroupPairFile {
        GroupPairFile {
            lambda: self.lambda,
            mdp0: self.mdp0.to_file_repr(),
            mdp1: self.mdp1.to_file_repr(),
        }
    }

    /// Uniformly random pair for tests and benchmarks: rows of `T` and `mu`
    /// from the simplex, rewards in `[-1, 1]`.
    pub fn random<R: rand::Rng + ?Sized>(
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        lambda: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mdp0 = random_mdp(num_states, num_actions, gamma, rng)?;
        let mdp1 = random_mdp(num_states, num_actions, gamma, rng)?;
        Self::new(mdp0, mdp1, lambda)
    }
}

fn simplex_point<R: rand::Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|v| v / total).collect();
    // pin the sum exactly so validation never trips on round-off
    let head: f64 = p[..k - 1].iter().sum();
    p[k - 1] = (1.0 - head).max(0.0);
    p
}

pub fn random_mdp<R: rand::Rng + ?Sized>(
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<Mdp> {
    let mu = simplex_point(num_states, rng);
    let mut t = Vec::with_capacity(num_states * num_actions * num_states);
    for _ in 0..num_states * num_actions {
        t.extend(simplex_point(num_states, rng));
    }
    let r = (0..num_states * num_actions)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Mdp::new(num_states, num_actions, gamma, mu, t, r)
}
