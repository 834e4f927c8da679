//! Dense two-phase simplex for the small linear programs that appear in this
//! crate: the atomized primal (few rows, thousands of columns) and the
//! finite relaxation of the dual semi-infinite program (few columns, tens of
//! rows).
//!
//! The solver works on a full tableau. Entering columns are chosen by the
//! most-negative reduced cost; after a run of degenerate pivots it switches
//! to Bland's rule so that cycling cannot occur.

use thiserror::Error;

/// Default feasibility / optimality tolerance.
pub const DEFAULT_TOL: f64 = 1e-9;

const PIVOT_TOL: f64 = 1e-11;
const DEGENERATE_RUN_BEFORE_BLAND: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("linear program is infeasible (phase-one residual {residual:.3e})")]
    Infeasible { residual: f64 },
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("simplex iteration limit {0} reached")]
    IterationLimit(usize),
    #[error("malformed linear program: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// A linear program over variables that are nonnegative unless marked free.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    sense: Sense,
    objective: Vec<f64>,
    free: Vec<bool>,
    constraints: Vec<Constraint>,
    tol: f64,
}

impl LinearProgram {
    pub fn new(sense: Sense, objective: Vec<f64>) -> Self {
        let n = objective.len();
        Self {
            sense,
            objective,
            free: vec![false; n],
            constraints: Vec::new(),
            tol: DEFAULT_TOL,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn set_free(&mut self, var: usize) {
        self.free[var] = true;
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn add_constraint(&mut self, coeffs: Vec<f64>, relation: Relation, rhs: f64) {
        self.constraints.push(Constraint { coeffs, relation, rhs });
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn solve(&self) -> Result<LpSolution, LpError> {
        let n = self.num_vars();
        if n == 0 {
            return Err(LpError::Malformed("no variables".into()));
        }
        for (i, c) in self.constraints.iter().enumerate() {
            if c.coeffs.len() != n {
                return Err(LpError::Malformed(format!(
                    "constraint {i} has {} coefficients, expected {n}",
                    c.coeffs.len()
                )));
            }
            if !c.rhs.is_finite() || c.coeffs.iter().any(|a| !a.is_finite()) {
                return Err(LpError::Malformed(format!("constraint {i} is not finite")));
            }
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(LpError::Malformed("objective is not finite".into()));
        }

        // Structural columns: each free variable becomes a (plus, minus) pair.
        let mut col_of = Vec::with_capacity(n);
        let mut n_struct = 0;
        for &f in &self.free {
            col_of.push(n_struct);
            n_struct += if f { 2 } else { 1 };
        }

        let m = self.constraints.len();
        let n_slack = self.constraints.iter().filter(|c| c.relation != Relation::Eq).count();
        let needs_artificial: Vec<bool> = self
            .constraints
            .iter()
            .map(|c| {
                let flipped = c.rhs < 0.0;
                match (c.relation, flipped) {
                    (Relation::Eq, _) => true,
                    (Relation::Le, false) | (Relation::Ge, true) => false,
                    (Relation::Le, true) | (Relation::Ge, false) => true,
                }
            })
            .collect();
        let n_art = needs_artificial.iter().filter(|&&a| a).count();
        let n_cols = n_struct + n_slack + n_art;
        let width = n_cols + 1;

        let mut tab = Tableau {
            rows: vec![0.0; m * width],
            m,
            width,
            basis: vec![0; m],
        };
        let mut slack_col = n_struct;
        let mut art_col = n_struct + n_slack;
        for (i, c) in self.constraints.iter().enumerate() {
            let sign = if c.rhs < 0.0 { -1.0 } else { 1.0 };
            let row = tab.row_mut(i);
            for (j, &a) in c.coeffs.iter().enumerate() {
                row[col_of[j]] = sign * a;
                if self.free[j] {
                    row[col_of[j] + 1] = -sign * a;
                }
            }
            row[n_cols] = sign * c.rhs;
            let relation = match (c.relation, sign < 0.0) {
                (Relation::Le, true) => Relation::Ge,
                (Relation::Ge, true) => Relation::Le,
                (r, _) => r,
            };
            match relation {
                Relation::Le => {
                    row[slack_col] = 1.0;
                    tab.basis[i] = slack_col;
                    slack_col += 1;
                }
                Relation::Ge => {
                    row[slack_col] = -1.0;
                    slack_col += 1;
                    row[art_col] = 1.0;
                    tab.basis[i] = art_col;
                    art_col += 1;
                }
                Relation::Eq => {
                    row[art_col] = 1.0;
                    tab.basis[i] = art_col;
                    art_col += 1;
                }
            }
        }

        let max_iter = 50 * (m + n_cols) + 1000;
        let mut iterations = 0;
        let art_start = n_struct + n_slack;

        if n_art > 0 {
            let mut cost = vec![0.0; n_cols];
            for c in cost.iter_mut().skip(art_start) {
                *c = 1.0;
            }
            let eligible = vec![true; n_cols];
            iterations += tab.optimize(&cost, &eligible, self.tol, max_iter)?;
            let residual: f64 = (0..m).filter(|&i| tab.basis[i] >= art_start).map(|i| tab.rhs(i)).sum();
            let scale = 1.0 + self.constraints.iter().map(|c| c.rhs.abs()).fold(0.0, f64::max);
            if residual > self.tol * scale * 10.0 {
                return Err(LpError::Infeasible { residual });
            }
            tab.evict_artificials(art_start);
        }

        let sign = match self.sense {
            Sense::Minimize => 1.0,
            Sense::Maximize => -1.0,
        };
        let mut cost = vec![0.0; n_cols];
        for j in 0..n {
            cost[col_of[j]] = sign * self.objective[j];
            if self.free[j] {
                cost[col_of[j] + 1] = -sign * self.objective[j];
            }
        }
        let mut eligible = vec![true; n_cols];
        for e in eligible.iter_mut().skip(art_start) {
            *e = false;
        }
        iterations += tab.optimize(&cost, &eligible, self.tol, max_iter)?;

        let mut cols = vec![0.0; n_cols];
        for i in 0..tab.m {
            cols[tab.basis[i]] = tab.rhs(i);
        }
        let x: Vec<f64> = (0..n)
            .map(|j| {
                if self.free[j] {
                    cols[col_of[j]] - cols[col_of[j] + 1]
                } else {
                    cols[col_of[j]]
                }
            })
            .collect();
        let objective = x.iter().zip(&self.objective).map(|(a, b)| a * b).sum();
        Ok(LpSolution {
            x,
            objective,
            iterations,
        })
    }
}

struct Tableau {
    rows: Vec<f64>,
    m: usize,
    width: usize,
    basis: Vec<usize>,
}

impl Tableau {
    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.width..(i + 1) * self.width]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.rows[i * self.width..(i + 1) * self.width]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.rows[i * self.width + self.width - 1]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let w = self.width;
        let p = self.rows[r * w + c];
        for v in self.row_mut(r) {
            *v /= p;
        }
        let pivot_row: Vec<f64> = self.row(r).to_vec();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.rows[i * w + c];
            if f != 0.0 {
                let row = &mut self.rows[i * w..(i + 1) * w];
                for (v, &p) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
                row[c] = 0.0;
            }
        }
        self.basis[r] = c;
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let n = self.width - 1;
        let mut red = cost.to_vec();
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                for (rj, &a) in red.iter_mut().zip(&self.row(i)[..n]) {
                    *rj -= cb * a;
                }
            }
        }
        red
    }

    /// Primal simplex from the current basic feasible solution.
    fn optimize(&mut self, cost: &[f64], eligible: &[bool], tol: f64, max_iter: usize) -> Result<usize, LpError> {
        let n = self.width - 1;
        let mut degenerate_run = 0;
        for iter in 0..max_iter {
            let red = self.reduced_costs(cost);
            let bland = degenerate_run >= DEGENERATE_RUN_BEFORE_BLAND;
            let mut enter = None;
            let mut best = -tol;
            for j in 0..n {
                if !eligible[j] || red[j] >= -tol {
                    continue;
                }
                if bland {
                    enter = Some(j);
                    break;
                }
                if red[j] < best {
                    best = red[j];
                    enter = Some(j);
                }
            }
            let Some(c) = enter else {
                return Ok(iter);
            };

            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m {
                let a = self.row(i)[c];
                if a > PIVOT_TOL {
                    let ratio = self.rhs(i).max(0.0) / a;
                    match leave {
                        None => leave = Some((i, ratio)),
                        Some((r, best_ratio)) => {
                            let tie = (ratio - best_ratio).abs() <= 1e-12 * (1.0 + best_ratio);
                            if ratio < best_ratio && !tie || tie && self.basis[i] < self.basis[r] {
                                leave = Some((i, ratio));
                            }
                        }
                    }
                }
            }
            let Some((r, ratio)) = leave else {
                return Err(LpError::Unbounded);
            };
            if ratio <= 1e-14 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(r, c);
        }
        Err(LpError::IterationLimit(max_iter))
    }

    /// Pivot basic artificial variables (at zero level) out of the basis, and
    /// drop rows that turn out to be redundant.
    fn evict_artificials(&mut self, art_start: usize) {
        let mut i = 0;
        while i < self.m {
            if self.basis[i] >= art_start {
                let row = self.row(i);
                let col = (0..art_start)
                    .filter(|&j| row[j].abs() > 1e-9)
                    .max_by(|&a, &b| row[a].abs().total_cmp(&row[b].abs()));
                match col {
                    Some(c) => {
                        self.pivot(i, c);
                        i += 1;
                    }
                    None => {
                        let w = self.width;
                        self.rows.drain(i * w..(i + 1) * w);
                        self.basis.remove(i);
                        self.m -= 1;
                    }
                }
            } else {
                i += 1;
            }
        }
    }
}
