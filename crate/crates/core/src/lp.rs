//! Two-phase dense simplex with Bland's anti-cycling rule.
//!
//! Problems are stated with arbitrary `≤ / = / ≥` rows and per-variable bounds
//! (lower bound `None` means the variable is free). Internally every variable is
//! shifted or split so that it is nonnegative, equality rows become a `≤`/`≥`
//! pair, and rows are sign-normalised so that the right-hand side is
//! nonnegative. Phase one minimises the sum of artificials; phase two optimises
//! the user objective from the resulting basis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lu_solve, DenseMatrix};

/// Primal feasibility tolerance.
pub const FEAS_TOL: f64 = 1e-7;
/// Tableau entries at or below this magnitude are never pivoted on.
pub const PIVOT_TOL: f64 = 1e-10;
/// Reduced costs must exceed this to enter the basis.
const COST_TOL: f64 = 1e-10;
const MAX_PIVOTS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Maximize,
    Minimize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpProblem {
    direction: Direction,
    objective: Vec<f64>,
    constraints: DenseMatrix,
    rhs: Vec<f64>,
    senses: Vec<Sense>,
    lower: Vec<Option<f64>>,
    upper: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpOutcome {
    pub status: LpStatus,
    pub value: Option<f64>,
    pub x: Option<Vec<f64>>,
}

impl LpOutcome {
    fn without_solution(status: LpStatus) -> Self {
        Self {
            status,
            value: None,
            x: None,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

impl LpProblem {
    /// An unconstrained problem over `objective.len()` nonnegative variables.
    pub fn new(direction: Direction, objective: Vec<f64>) -> Self {
        let n = objective.len();
        Self {
            direction,
            objective,
            constraints: DenseMatrix::zeros(0, n),
            rhs: Vec::new(),
            senses: Vec::new(),
            lower: vec![Some(0.0); n],
            upper: vec![None; n],
        }
    }

    pub fn with_constraints(
        direction: Direction,
        objective: Vec<f64>,
        constraints: DenseMatrix,
        senses: Vec<Sense>,
        rhs: Vec<f64>,
    ) -> Result<Self> {
        let n = objective.len();
        let p = Self {
            direction,
            objective,
            constraints,
            rhs,
            senses,
            lower: vec![Some(0.0); n],
            upper: vec![None; n],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn add_constraint(&mut self, coeffs: &[f64], sense: Sense, rhs: f64) -> Result<()> {
        if coeffs.len() != self.num_vars() {
            return Err(Error::DimensionMismatch(format!(
                "constraint has {} coefficients for {} variables",
                coeffs.len(),
                self.num_vars()
            )));
        }
        let mut data = self.constraints.as_slice().to_vec();
        data.extend_from_slice(coeffs);
        self.constraints = DenseMatrix::new(self.constraints.rows() + 1, self.num_vars(), data)?;
        self.senses.push(sense);
        self.rhs.push(rhs);
        Ok(())
    }

    pub fn set_bounds(&mut self, var: usize, lower: Option<f64>, upper: Option<f64>) -> Result<()> {
        if var >= self.num_vars() {
            return Err(Error::IndexOutOfRange {
                index: var,
                len: self.num_vars(),
            });
        }
        self.lower[var] = lower;
        self.upper[var] = upper;
        Ok(())
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.rhs.len()
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn constraints(&self) -> &DenseMatrix {
        &self.constraints
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn senses(&self) -> &[Sense] {
        &self.senses
    }

    pub fn bounds(&self, var: usize) -> (Option<f64>, Option<f64>) {
        (self.lower[var], self.upper[var])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        let m = self.rhs.len();
        if self.constraints.cols() != n || self.constraints.rows() != m || self.senses.len() != m
        {
            return Err(Error::DimensionMismatch(format!(
                "objective {n}, matrix {}x{}, rhs {m}, senses {}",
                self.constraints.rows(),
                self.constraints.cols(),
                self.senses.len()
            )));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::DimensionMismatch("bounds length".into()));
        }
        if self.objective.iter().chain(&self.rhs).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("LP objective or rhs".into()));
        }
        Ok(())
    }

    /// Largest violation of any row or bound at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0_f64;
        for (i, (&sense, &b)) in self.senses.iter().zip(&self.rhs).enumerate() {
            let lhs: f64 = self.constraints.row(i).iter().zip(x).map(|(a, v)| a * v).sum();
            let v = match sense {
                Sense::Le => lhs - b,
                Sense::Ge => b - lhs,
                Sense::Eq => (lhs - b).abs(),
            };
            worst = worst.max(v);
        }
        for (j, &v) in x.iter().enumerate() {
            if let Some(l) = self.lower[j] {
                worst = worst.max(l - v);
            }
            if let Some(u) = self.upper[j] {
                worst = worst.max(v - u);
            }
        }
        worst
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }
}

/// How an original variable is expressed through nonnegative standard columns.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    Shifted { col: usize, offset: f64 },
    Split { pos: usize, neg: usize },
}

struct StandardForm {
    n_cols: usize,
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    senses: Vec<Sense>,
    cost: Vec<f64>,
    maps: Vec<VarMap>,
}

fn standardize(p: &LpProblem) -> StandardForm {
    let mut maps = Vec::with_capacity(p.num_vars());
    let mut n_cols = 0;
    for j in 0..p.num_vars() {
        match p.lower[j] {
            Some(l) => {
                maps.push(VarMap::Shifted { col: n_cols, offset: l });
                n_cols += 1;
            }
            None => {
                maps.push(VarMap::Split {
                    pos: n_cols,
                    neg: n_cols + 1,
                });
                n_cols += 2;
            }
        }
    }

    let sign = match p.direction {
        Direction::Maximize => 1.0,
        Direction::Minimize => -1.0,
    };
    let mut cost = vec![0.0; n_cols];
    for (j, map) in maps.iter().enumerate() {
        match *map {
            VarMap::Shifted { col, .. } => cost[col] = sign * p.objective[j],
            VarMap::Split { pos, neg } => {
                cost[pos] = sign * p.objective[j];
                cost[neg] = -sign * p.objective[j];
            }
        }
    }

    let expand = |coeffs: &[f64]| -> (Vec<f64>, f64) {
        let mut row = vec![0.0; n_cols];
        let mut shift = 0.0;
        for (j, map) in maps.iter().enumerate() {
            let a = coeffs[j];
            match *map {
                VarMap::Shifted { col, offset } => {
                    row[col] = a;
                    shift += a * offset;
                }
                VarMap::Split { pos, neg } => {
                    row[pos] = a;
                    row[neg] = -a;
                }
            }
        }
        (row, shift)
    };

    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    let mut senses = Vec::new();
    for i in 0..p.num_constraints() {
        let (row, shift) = expand(p.constraints.row(i));
        let b = p.rhs[i] - shift;
        match p.senses[i] {
            Sense::Eq => {
                rows.push(row.clone());
                rhs.push(b);
                senses.push(Sense::Le);
                rows.push(row);
                rhs.push(b);
                senses.push(Sense::Ge);
            }
            s => {
                rows.push(row);
                rhs.push(b);
                senses.push(s);
            }
        }
    }
    for j in 0..p.num_vars() {
        if let Some(u) = p.upper[j] {
            let mut unit = vec![0.0; p.num_vars()];
            unit[j] = 1.0;
            let (row, shift) = expand(&unit);
            rows.push(row);
            rhs.push(u - shift);
            senses.push(Sense::Le);
        }
    }

    StandardForm {
        n_cols,
        rows,
        rhs,
        senses,
        cost,
        maps,
    }
}

struct Tableau {
    /// Row-major `m x (width + 1)`; the last column is the rhs.
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    width: usize,
    /// Columns `>= first_artificial` are artificials.
    first_artificial: usize,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize, obj: &mut [f64]) {
        let w = self.width + 1;
        let p = self.t[row][col];
        for v in self.t[row].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.t[row].clone();
        for (i, r) in self.t.iter_mut().enumerate() {
            if i == row {
                continue;
            }
            let f = r[col];
            if f != 0.0 {
                for k in 0..w {
                    r[k] -= f * pivot_row[k];
                }
                r[col] = 0.0;
            }
        }
        let f = obj[col];
        if f != 0.0 {
            for k in 0..w {
                obj[k] -= f * pivot_row[k];
            }
            obj[col] = 0.0;
        }
        self.basis[row] = col;
    }

    /// Maximises the objective whose reduced-cost row is `obj`
    /// (`obj[width]` holds minus the current objective value).
    fn run(&mut self, obj: &mut [f64], allowed: usize) -> Result<LpStatus> {
        for _ in 0..MAX_PIVOTS {
            // Bland: lowest-index improving column.
            let Some(enter) = (0..allowed).find(|&j| obj[j] > COST_TOL) else {
                return Ok(LpStatus::Optimal);
            };
            let mut leave: Option<(usize, f64)> = None;
            for (i, r) in self.t.iter().enumerate() {
                let a = r[enter];
                if a > PIVOT_TOL {
                    let ratio = r[self.width] / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((bi, br)) => {
                            let tie = (ratio - br).abs() <= 1e-12 * (1.0 + br.abs());
                            if ratio < br && !tie || tie && self.basis[i] < self.basis[bi] {
                                Some((i, ratio))
                            } else {
                                Some((bi, br))
                            }
                        }
                    };
                }
            }
            match leave {
                None => return Ok(LpStatus::Unbounded),
                Some((row, _)) => self.pivot(row, enter, obj),
            }
        }
        Err(Error::LpStatus("simplex pivot limit reached".into()))
    }
}

/// Solves a linear program. Infeasible and unbounded problems are reported
/// through [`LpOutcome::status`], not as errors.
pub fn lp_solve(p: &LpProblem) -> Result<LpOutcome> {
    p.validate()?;
    let sf = standardize(p);
    let m = sf.rows.len();
    let n = sf.n_cols;

    // Orient rows so the rhs is nonnegative.
    let mut rows = sf.rows.clone();
    let mut rhs = sf.rhs.clone();
    let mut senses = sf.senses.clone();
    for i in 0..m {
        if rhs[i] < 0.0 {
            rhs[i] = -rhs[i];
            rows[i].iter_mut().for_each(|v| *v = -*v);
            senses[i] = match senses[i] {
                Sense::Le => Sense::Ge,
                Sense::Ge => Sense::Le,
                Sense::Eq => Sense::Eq,
            };
        }
    }

    let n_slack = m;
    let n_art = senses.iter().filter(|s| **s == Sense::Ge).count();
    let width = n + n_slack + n_art;
    let first_artificial = n + n_slack;
    let mut t = vec![vec![0.0; width + 1]; m];
    let mut basis = vec![0; m];
    let mut art = first_artificial;
    for i in 0..m {
        t[i][..n].copy_from_slice(&rows[i]);
        t[i][width] = rhs[i];
        match senses[i] {
            Sense::Le => {
                t[i][n + i] = 1.0;
                basis[i] = n + i;
            }
            _ => {
                t[i][n + i] = -1.0;
                t[i][art] = 1.0;
                basis[i] = art;
                art += 1;
            }
        }
    }
    let mut tab = Tableau {
        t,
        basis,
        width,
        first_artificial,
    };

    let scale = 1.0 + rhs.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    if n_art > 0 {
        // Phase one: maximise -sum(artificials).
        let mut obj = vec![0.0; width + 1];
        for (i, r) in tab.t.iter().enumerate() {
            if tab.basis[i] >= first_artificial {
                for k in 0..first_artificial {
                    obj[k] += r[k];
                }
                obj[width] += r[width];
            }
        }
        tab.run(&mut obj, first_artificial)?;
        let infeasibility: f64 = tab
            .t
            .iter()
            .zip(&tab.basis)
            .filter(|(_, &b)| b >= first_artificial)
            .map(|(r, _)| r[width])
            .sum();
        if infeasibility > FEAS_TOL * scale {
            return Ok(LpOutcome::without_solution(LpStatus::Infeasible));
        }
        // Drive remaining (zero-level) artificials out; drop redundant rows.
        let mut i = 0;
        while i < tab.t.len() {
            if tab.basis[i] >= first_artificial {
                let col = (0..first_artificial)
                    .filter(|&j| tab.t[i][j].abs() > PIVOT_TOL)
                    .max_by(|&a, &b| tab.t[i][a].abs().total_cmp(&tab.t[i][b].abs()));
                match col {
                    Some(j) => {
                        let mut dummy = vec![0.0; width + 1];
                        tab.pivot(i, j, &mut dummy);
                    }
                    None => {
                        tab.t.remove(i);
                        tab.basis.remove(i);
                        continue;
                    }
                }
            }
            i += 1;
        }
    }

    // Phase two.
    let mut cost = vec![0.0; width];
    cost[..n].copy_from_slice(&sf.cost);
    let mut obj = vec![0.0; width + 1];
    obj[..width].copy_from_slice(&cost);
    for (i, r) in tab.t.iter().enumerate() {
        let cb = cost[tab.basis[i]];
        if cb != 0.0 {
            for k in 0..=width {
                obj[k] -= cb * r[k];
            }
        }
    }
    if tab.run(&mut obj, first_artificial)? == LpStatus::Unbounded {
        return Ok(LpOutcome::without_solution(LpStatus::Unbounded));
    }

    let std_x = refine_basic_solution(&tab, &rows, &rhs, &senses, n);
    let x: Vec<f64> = sf
        .maps
        .iter()
        .map(|map| match *map {
            VarMap::Shifted { col, offset } => offset + std_x[col],
            VarMap::Split { pos, neg } => std_x[pos] - std_x[neg],
        })
        .collect();
    let value = p.evaluate(&x);
    Ok(LpOutcome {
        status: LpStatus::Optimal,
        value: Some(value),
        x: Some(x),
    })
}

/// Re-solves `B x_B = b` for the final basis to shed accumulated pivot error.
/// Falls back to the tableau values when rows were dropped or the basis matrix
/// is numerically singular.
fn refine_basic_solution(
    tab: &Tableau,
    rows: &[Vec<f64>],
    rhs: &[f64],
    senses: &[Sense],
    n: usize,
) -> Vec<f64> {
    let width = tab.width;
    let mut x = vec![0.0; n];
    let from_tableau = |x: &mut Vec<f64>| {
        for (r, &b) in tab.t.iter().zip(&tab.basis) {
            if b < n {
                x[b] = r[width].max(0.0);
            }
        }
    };
    let m = rows.len();
    if tab.t.len() != m || tab.basis.iter().any(|&b| b >= tab.first_artificial) {
        from_tableau(&mut x);
        return x;
    }
    let mut bmat = DenseMatrix::zeros(m, m);
    for (k, &col) in tab.basis.iter().enumerate() {
        if col < n {
            for i in 0..m {
                bmat[(i, k)] = rows[i][col];
            }
        } else {
            let i = col - n;
            bmat[(i, k)] = if senses[i] == Sense::Le { 1.0 } else { -1.0 };
        }
    }
    match lu_solve(&bmat, rhs) {
        Ok(xb) => {
            for (k, &col) in tab.basis.iter().enumerate() {
                if col < n {
                    x[col] = xb[k].max(0.0);
                }
            }
        }
        Err(_) => from_tableau(&mut x),
    }
    x
}
