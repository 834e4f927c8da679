//! Gridded value functions and the backward dual Bellman recursion
//!
//! ```text
//! v_T(x) = 1_A(x)
//! v_t(x) = 1_A(x) * max_u  inf_{mu in D_t} E_mu[ v_{t+1}(f(x, u, w)) ]
//! ```
//!
//! where the inner infimum is evaluated through its dual semi-infinite program
//! (robust mode) or as a plain expectation under one fixed law (nominal mode).

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::ambiguity::{AtomList, MomentAmbiguitySet, NominalDistribution};
use crate::dual_sip::{self, Payoff, PiecewiseLinear, Segment, SipError, SipOptions};
use crate::model::{BoxRegion, Dynamics, Model, ModelError, SafeRegion};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BellmanError {
    #[error("grid configuration: {0}")]
    Grid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid value function: {0}")]
    Values(String),
    #[error("stage {stage}: solver failed at x={x:?}, u={u}: {source}")]
    Solver {
        stage: usize,
        x: Vec<f64>,
        u: usize,
        #[source]
        source: SipError,
    },
    #[error("schedule has {got} entries for horizon {horizon}")]
    Schedule { horizon: usize, got: usize },
}

/// Uniform tensor grid whose lines pass exactly through every face of the
/// safe box. Nodes are stored with the first coordinate varying slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrid {
    axes: Vec<Vec<f64>>,
    region: SafeRegion,
    /// Per axis: indices of the nodes at the lower and upper face of `A`.
    region_index: Vec<(usize, usize)>,
    strides: Vec<usize>,
}

impl StateGrid {
    pub fn new(bounds: &BoxRegion, nodes: &[usize], region: &SafeRegion) -> Result<Self, BellmanError> {
        let n = bounds.dim();
        if nodes.len() != n || region.dim() != n {
            return Err(BellmanError::Grid(format!(
                "grid has {n} dimensions but {} node counts and a {}-dimensional safe box",
                nodes.len(),
                region.dim()
            )));
        }
        let mut axes = Vec::with_capacity(n);
        let mut region_index = Vec::with_capacity(n);
        for (i, &k) in nodes.iter().enumerate() {
            let (lo, hi) = (bounds.lo()[i], bounds.hi()[i]);
            if k < 2 || lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
                return Err(BellmanError::Grid(format!(
                    "axis {i}: need at least 2 nodes on a nonempty interval, got {k} on [{lo}, {hi}]"
                )));
            }
            let (alo, ahi) = (region.lo()[i], region.hi()[i]);
            if alo < lo || ahi > hi {
                return Err(BellmanError::Grid(format!(
                    "axis {i}: grid [{lo}, {hi}] does not cover the safe interval [{alo}, {ahi}]"
                )));
            }
            let h = (hi - lo) / (k - 1) as f64;
            let mut axis: Vec<f64> = (0..k).map(|j| lo + h * j as f64).collect();
            axis[k - 1] = hi;
            let mut snap = |a: f64, face: &str| -> Result<usize, BellmanError> {
                let pos = (a - lo) / h;
                let j = pos.round();
                if (pos - j).abs() > 1e-6 {
                    return Err(BellmanError::Grid(format!(
                        "axis {i}: {face} face {a} of the safe box is not on a grid line (spacing {h})"
                    )));
                }
                let j = j as usize;
                axis[j] = a;
                Ok(j)
            };
            let ja = snap(alo, "lower")?;
            let jb = snap(ahi, "upper")?;
            axes.push(axis);
            region_index.push((ja, jb));
        }
        let mut strides = vec![1; n];
        for i in (0..n.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * axes[i + 1].len();
        }
        Ok(Self {
            axes,
            region: region.clone(),
            region_index,
            strides,
        })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axis(&self, i: usize) -> &[f64] {
        &self.axes[i]
    }

    pub fn region(&self) -> &SafeRegion {
        &self.region
    }

    pub fn spacing(&self, i: usize) -> f64 {
        let a = &self.axes[i];
        (a[a.len() - 1] - a[0]) / (a.len() - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        self.strides
            .iter()
            .zip(&self.axes)
            .map(|(s, a)| flat / s % a.len())
            .collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .zip(&self.axes)
            .map(|(&j, a)| a[j])
            .collect()
    }

    pub fn node_in_region(&self, flat: usize) -> bool {
        self.multi_index(flat)
            .iter()
            .zip(&self.region_index)
            .all(|(&j, &(a, b))| a <= j && j <= b)
    }

    /// Nearest node, ties going to the lower coordinate; clamps outside the grid.
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let idx: Vec<usize> = x
            .iter()
            .zip(&self.axes)
            .map(|(&v, a)| {
                let h = (a[a.len() - 1] - a[0]) / (a.len() - 1) as f64;
                let j = ((v - a[0]) / h).floor().clamp(0.0, (a.len() - 1) as f64) as usize;
                if j + 1 < a.len() && (a[j + 1] - v) < (v - a[j]) {
                    j + 1
                } else {
                    j
                }
            })
            .collect();
        self.flat_index(&idx)
    }

    /// Cell lookup restricted to the safe box: for each axis the lower vertex
    /// index and the weight of the upper vertex.
    fn region_cell(&self, x: &[f64]) -> Vec<(usize, f64)> {
        x.iter()
            .zip(&self.axes)
            .zip(&self.region_index)
            .map(|((&v, a), &(ja, jb))| {
                if ja == jb {
                    return (ja, 0.0);
                }
                let h = (a[a.len() - 1] - a[0]) / (a.len() - 1) as f64;
                let j = (((v - a[0]) / h).floor() as isize).clamp(ja as isize, jb as isize - 1) as usize;
                let t = ((v - a[j]) / (a[j + 1] - a[j])).clamp(0.0, 1.0);
                (j, t)
            })
            .collect()
    }

    /// Grid vertices with a positive multilinear weight at `x` (inside `A`).
    pub fn support_nodes(&self, x: &[f64]) -> Vec<usize> {
        let cell = self.region_cell(x);
        let mut out = vec![0usize];
        for (i, &(j, t)) in cell.iter().enumerate() {
            let mut next = Vec::with_capacity(out.len() * 2);
            for base in &out {
                if t < 1.0 {
                    next.push(base + j * self.strides[i]);
                }
                if t > 0.0 {
                    next.push(base + (j + 1) * self.strides[i]);
                }
            }
            out = next;
        }
        out
    }
}

/// Value function on a [`StateGrid`], multilinear inside `A` and zero outside.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    stage: usize,
    grid: Arc<StateGrid>,
    values: Vec<f64>,
}

impl ValueFunction {
    pub fn from_values(stage: usize, grid: Arc<StateGrid>, values: Vec<f64>) -> Result<Self, BellmanError> {
        if values.len() != grid.len() {
            return Err(BellmanError::Values(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        for (k, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(BellmanError::Values(format!("node {k} has value {v} outside [0, 1]")));
            }
            if v != 0.0 && !grid.node_in_region(k) {
                return Err(BellmanError::Values(format!("node {k} is outside A but has value {v}")));
            }
        }
        Ok(Self { stage, grid, values })
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn grid(&self) -> &Arc<StateGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_at_node(&self, flat: usize) -> f64 {
        self.values[flat]
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        if !self.grid.region.contains(x) {
            return 0.0;
        }
        let cell = self.grid.region_cell(x);
        let n = cell.len();
        let mut acc = 0.0;
        for corner in 0..1usize << n {
            let mut w = 1.0;
            let mut flat = 0;
            for (i, &(j, t)) in cell.iter().enumerate() {
                let up = corner >> i & 1 == 1;
                w *= if up { t } else { 1.0 - t };
                flat += (j + usize::from(up)) * self.grid.strides[i];
            }
            if w > 0.0 {
                acc += w * self.values[flat];
            }
        }
        acc.clamp(0.0, 1.0)
    }

    /// Payoff `w -> v(f(x, u, w))` for the dual solver. Scalar affine systems
    /// with a scalar disturbance get the exact piecewise-linear form.
    pub fn payoff<'a>(&'a self, dynamics: &'a Dynamics, x: &[f64], u: &[f64], support: &BoxRegion) -> Payoff<'a> {
        if let (Some(desc), 1, 1) = (dynamics.affine_descriptor(), self.grid.dim(), support.dim()) {
            let offset = desc.offset(x, u)[0];
            let slope = desc.g_w[(0, 0)];
            return Payoff::Piecewise(self.along_line(offset, slope, support.lo()[0], support.hi()[0]));
        }
        let x = x.to_vec();
        let u = u.to_vec();
        Payoff::Function(Box::new(move |w: &[f64]| {
            self.eval(&dynamics.step_unchecked(&x, &u, w))
        }))
    }

    /// `w -> v(offset + slope * w)` on `[w_lo, w_hi]` for a scalar state.
    pub fn along_line(&self, offset: f64, slope: f64, w_lo: f64, w_hi: f64) -> PiecewiseLinear {
        let constant = |c: f64| {
            PiecewiseLinear::new(vec![Segment {
                lo: w_lo,
                hi: w_hi,
                intercept: c,
                slope: 0.0,
            }])
            .expect("single segment")
        };
        if slope == 0.0 || w_lo == w_hi {
            return constant(self.eval(&[offset + slope * w_lo]));
        }
        let axis = &self.grid.axes[0];
        let (ja, jb) = self.grid.region_index[0];
        let (alo, ahi) = (axis[ja], axis[jb]);
        let y0 = offset + slope * w_lo;
        let y1 = offset + slope * w_hi;
        let (ylo, yhi) = if y0 <= y1 { (y0, y1) } else { (y1, y0) };

        // State-space pieces (lo, hi, a, b) meaning v(y) = a + b * y on [lo, hi].
        let mut pieces: Vec<(f64, f64, f64, f64)> = Vec::new();
        if ylo < alo {
            pieces.push((ylo, yhi.min(alo), 0.0, 0.0));
        }
        let (ilo, ihi) = (ylo.max(alo), yhi.min(ahi));
        if ilo <= ihi {
            if ja == jb {
                pieces.push((ilo, ihi, self.values[ja], 0.0));
            } else {
                let mut j = self.grid.region_cell(&[ilo])[0].0;
                let mut start = ilo;
                loop {
                    let end = axis[j + 1].min(ihi);
                    let (va, vb) = (self.values[j], self.values[j + 1]);
                    let b = (vb - va) / (axis[j + 1] - axis[j]);
                    pieces.push((start, end, va - b * axis[j], b));
                    if end >= ihi || j + 1 >= jb {
                        break;
                    }
                    start = end;
                    j += 1;
                }
            }
        }
        if yhi > ahi {
            pieces.push((ylo.max(ahi), yhi, 0.0, 0.0));
        }

        // Map to disturbance space: y = offset + slope * w.
        let to_w = |y: f64| (y - offset) / slope;
        let mut segs: Vec<Segment> = pieces
            .into_iter()
            .map(|(lo, hi, a, b)| {
                let (p, q) = if slope > 0.0 {
                    (to_w(lo), to_w(hi))
                } else {
                    (to_w(hi), to_w(lo))
                };
                Segment {
                    lo: p,
                    hi: q,
                    intercept: a + b * offset,
                    slope: b * slope,
                }
            })
            .collect();
        if slope < 0.0 {
            segs.reverse();
        }
        // Make the tiling exact despite rounding in the inverse map.
        let k = segs.len();
        let mut prev = w_lo;
        for (i, s) in segs.iter_mut().enumerate() {
            s.lo = prev;
            s.hi = if i + 1 == k { w_hi } else { s.hi.clamp(prev, w_hi) };
            prev = s.hi;
        }
        PiecewiseLinear::new(segs).expect("tiling by construction")
    }
}

/// `v_T = 1_A` on the grid.
pub fn terminal(grid: Arc<StateGrid>, stage: usize) -> ValueFunction {
    let values = (0..grid.len())
        .map(|k| if grid.node_in_region(k) { 1.0 } else { 0.0 })
        .collect();
    ValueFunction { stage, grid, values }
}

/// Either one shared entry or one entry per stage `t = 0..T-1`.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule<T> {
    Shared(T),
    PerStage(Vec<T>),
}

impl<T> Schedule<T> {
    pub fn get(&self, t: usize) -> &T {
        match self {
            Schedule::Shared(v) => v,
            Schedule::PerStage(v) => &v[t],
        }
    }

    fn check(&self, horizon: usize) -> Result<(), BellmanError> {
        match self {
            Schedule::PerStage(v) if v.len() != horizon => Err(BellmanError::Schedule { horizon, got: v.len() }),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    Robust(Schedule<MomentAmbiguitySet>),
    Nominal {
        dists: Schedule<NominalDistribution>,
        atoms_per_dim: usize,
    },
}

impl Mode {
    pub fn robust(amb: MomentAmbiguitySet) -> Self {
        Mode::Robust(Schedule::Shared(amb))
    }

    pub fn nominal(dist: NominalDistribution, atoms_per_dim: usize) -> Self {
        Mode::Nominal {
            dists: Schedule::Shared(dist),
            atoms_per_dim,
        }
    }

    /// Disturbance support used at stage `t`.
    pub fn support(&self, t: usize) -> &BoxRegion {
        match self {
            Mode::Robust(s) => s.get(t).support(),
            Mode::Nominal { dists, .. } => dists.get(t).support(),
        }
    }

    fn check(&self, horizon: usize) -> Result<(), BellmanError> {
        match self {
            Mode::Robust(s) => s.check(horizon),
            Mode::Nominal { dists, .. } => dists.check(horizon),
        }
    }
}

/// The inner problem used at one stage.
#[derive(Debug, Clone, Copy)]
pub enum StageMode<'a> {
    Robust(&'a MomentAmbiguitySet),
    Nominal(&'a AtomList),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BackupOptions {
    pub sip: SipOptions,
    /// Restrict the maximization to this control index (if admissible).
    pub pinned_control: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageDiagnostics {
    pub solves: usize,
    pub unconverged: usize,
    pub max_iterations: usize,
    /// Most negative final residual over all dual solves.
    pub worst_residual: f64,
}

#[derive(Debug, Clone)]
pub struct Backup {
    pub values: ValueFunction,
    /// Maximizing control index per node (lowest admissible index outside `A`).
    pub policy: Vec<usize>,
    pub diagnostics: StageDiagnostics,
}

struct NodeResult {
    value: f64,
    control: usize,
    diag: StageDiagnostics,
}

/// One step of the recursion producing `v_t` and the argmax table `phi_t`.
pub fn backup(
    v_next: &ValueFunction,
    model: &Model,
    stage: StageMode<'_>,
    opts: &BackupOptions,
) -> Result<Backup, BellmanError> {
    let grid = v_next.grid.clone();
    let t = v_next.stage.saturating_sub(1);
    let results: Vec<Result<NodeResult, BellmanError>> = (0..grid.len())
        .into_par_iter()
        .map(|k| backup_node(k, t, v_next, model, stage, opts))
        .collect();
    let mut values = Vec::with_capacity(grid.len());
    let mut policy = Vec::with_capacity(grid.len());
    let mut diag = StageDiagnostics::default();
    for r in results {
        let r = r?;
        values.push(r.value);
        policy.push(r.control);
        diag.solves += r.diag.solves;
        diag.unconverged += r.diag.unconverged;
        diag.max_iterations = diag.max_iterations.max(r.diag.max_iterations);
        diag.worst_residual = diag.worst_residual.min(r.diag.worst_residual);
    }
    Ok(Backup {
        values: ValueFunction { stage: t, grid, values },
        policy,
        diagnostics: diag,
    })
}

fn backup_node(
    k: usize,
    t: usize,
    v_next: &ValueFunction,
    model: &Model,
    stage: StageMode<'_>,
    opts: &BackupOptions,
) -> Result<NodeResult, BellmanError> {
    let grid = &v_next.grid;
    let x = grid.node(k);
    let mut admissible = model.controls.admissible_indices(&x);
    let mut diag = StageDiagnostics::default();
    if !grid.node_in_region(k) {
        return Ok(NodeResult {
            value: 0.0,
            control: admissible.first().copied().unwrap_or(0),
            diag,
        });
    }
    if let Some(p) = opts.pinned_control {
        if admissible.contains(&p) {
            admissible = vec![p];
        }
    }
    let Some(&first) = admissible.first() else {
        return Err(ModelError::NoAdmissibleControl { state: x }.into());
    };
    let mut best = (f64::NEG_INFINITY, first);
    for &ui in &admissible {
        let u = model.controls.get(ui);
        let q = match stage {
            StageMode::Robust(amb) => {
                let (value, cert) = dual_sip::dual_inner_value(&x, u, v_next, &model.dynamics, amb, &opts.sip)
                    .map_err(|source| BellmanError::Solver {
                        stage: t,
                        x: x.clone(),
                        u: ui,
                        source,
                    })?;
                diag.solves += 1;
                diag.unconverged += usize::from(!cert.converged);
                diag.max_iterations = diag.max_iterations.max(cert.iterations);
                diag.worst_residual = diag.worst_residual.min(cert.residual);
                value
            }
            StageMode::Nominal(atoms) => {
                diag.solves += 1;
                atoms
                    .expectation(|w| v_next.eval(&model.dynamics.step_unchecked(&x, u, w)))
                    .clamp(0.0, 1.0)
            }
        };
        if q > best.0 {
            best = (q, ui);
        }
    }
    Ok(NodeResult {
        value: best.0,
        control: best.1,
        diag,
    })
}

/// Value functions `v_0..v_T` (indexed by stage) and policies `phi_0..phi_{T-1}`.
#[derive(Debug, Clone)]
pub struct Solution {
    pub values: Vec<ValueFunction>,
    pub policies: Vec<Vec<usize>>,
    pub diagnostics: Vec<StageDiagnostics>,
}

impl Solution {
    pub fn horizon(&self) -> usize {
        self.values.len() - 1
    }
}

/// Backward recursion from `v_T = 1_A`.
pub fn solve_recursion(
    model: &Model,
    mode: &Mode,
    grid: Arc<StateGrid>,
    opts: &BackupOptions,
) -> Result<Solution, BellmanError> {
    let horizon = model.horizon;
    mode.check(horizon)?;
    if grid.region() != &model.safe_region {
        return Err(BellmanError::Grid("grid is aligned to a different safe box".into()));
    }
    if grid.dim() != model.dynamics.state_dim() {
        return Err(BellmanError::Grid(
            "grid dimension differs from the state dimension".into(),
        ));
    }
    let nodes: Vec<Vec<f64>> = (0..grid.len())
        .filter(|&k| grid.node_in_region(k))
        .map(|k| grid.node(k))
        .collect();
    model.controls.check_nonempty_at(nodes.iter().map(Vec::as_slice))?;

    let mut values = vec![terminal(grid, horizon)];
    let mut policies = Vec::with_capacity(horizon);
    let mut diagnostics = Vec::with_capacity(horizon);
    for t in (0..horizon).rev() {
        let v_next = values.last().expect("nonempty");
        let atoms;
        let stage = match mode {
            Mode::Robust(s) => StageMode::Robust(s.get(t)),
            Mode::Nominal { dists, atoms_per_dim } => {
                atoms = dists.get(t).singleton(*atoms_per_dim);
                StageMode::Nominal(&atoms)
            }
        };
        let b = backup(v_next, model, stage, opts)?;
        log::debug!(
            "stage {t}: {} solves, {} unconverged, max {} iterations",
            b.diagnostics.solves,
            b.diagnostics.unconverged,
            b.diagnostics.max_iterations
        );
        values.push(b.values);
        policies.push(b.policy);
        diagnostics.push(b.diagnostics);
    }
    values.reverse();
    policies.reverse();
    diagnostics.reverse();
    Ok(Solution {
        values,
        policies,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tcl_preset;

    fn tcl_grid() -> Arc<StateGrid> {
        let m = tcl_preset();
        Arc::new(StateGrid::new(&BoxRegion::interval(18.0, 23.0).unwrap(), &[601], &m.safe_region).unwrap())
    }

    #[test]
    fn grid_hits_safe_faces_exactly() {
        let g = tcl_grid();
        assert!(g.axis(0).contains(&19.0));
        assert!(g.axis(0).contains(&22.0));
        let misaligned = StateGrid::new(
            &BoxRegion::interval(18.0, 23.0).unwrap(),
            &[600],
            &tcl_preset().safe_region,
        );
        assert!(misaligned.is_err());
    }

    #[test]
    fn terminal_indicator() {
        let g = tcl_grid();
        let v = terminal(g.clone(), 18);
        let at = |x: f64| v.value_at_node(g.axis(0).iter().position(|&a| a == x).unwrap());
        assert_eq!(at(19.0), 1.0);
        assert_eq!(at(22.0), 1.0);
        let k = g.nearest_node(&[22.5]);
        assert_eq!(v.value_at_node(k), 0.0);
        let inside = g.axis(0).iter().filter(|&&x| (19.0..=22.0).contains(&x)).count();
        assert_eq!(v.values().iter().sum::<f64>() as usize, inside);
        assert_eq!(inside, 361);
    }

    #[test]
    fn eval_is_zero_outside_and_interpolates_inside() {
        let g = tcl_grid();
        let vals: Vec<f64> = (0..g.len())
            .map(|k| {
                if g.node_in_region(k) {
                    (g.node(k)[0] - 19.0) / 3.0
                } else {
                    0.0
                }
            })
            .collect();
        let v = ValueFunction::from_values(0, g, vals).unwrap();
        assert_eq!(v.eval(&[18.99]), 0.0);
        assert_eq!(v.eval(&[22.01]), 0.0);
        assert!((v.eval(&[20.123]) - 1.123 / 3.0).abs() < 1e-12);
        assert!((v.eval(&[22.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn along_line_matches_pointwise_eval() {
        let g = tcl_grid();
        let vals: Vec<f64> = (0..g.len())
            .map(|k| {
                if g.node_in_region(k) {
                    let x = g.node(k)[0];
                    (0.5 + 0.5 * (3.0 * x).sin()).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect();
        let v = ValueFunction::from_values(3, g, vals).unwrap();
        for &(offset, slope) in &[(21.9, 1.0), (19.05, -1.0), (20.4, 0.7), (18.5, 2.0)] {
            let pwl = v.along_line(offset, slope, -0.4, 0.4);
            for i in 0..=997 {
                let w = -0.4 + 0.8 * i as f64 / 997.0;
                let y = offset + slope * w;
                let on_face = y == 19.0 || y == 22.0;
                if !on_face {
                    assert!((pwl.eval(w) - v.eval(&[y])).abs() < 1e-12, "w={w} y={y}");
                }
            }
        }
    }

    #[test]
    fn outside_nodes_are_zero_regardless() {
        let m = tcl_preset();
        let g = tcl_grid();
        let amb = MomentAmbiguitySet::scalar(-0.036, 0.036, 0.0, 0.1, 0.0625, 1.0).unwrap();
        let vt = terminal(g.clone(), 1);
        let b = backup(&vt, &m, StageMode::Robust(&amb), &BackupOptions::default()).unwrap();
        for k in 0..g.len() {
            if !g.node_in_region(k) {
                assert_eq!(b.values.value_at_node(k), 0.0);
            }
        }
        // One step with a tiny support: every safe node can stay safe.
        let x = 20.5;
        let k = g.nearest_node(&[x]);
        assert!((b.values.value_at_node(k) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_horizon_is_indicator() {
        let mut m = tcl_preset();
        m.horizon = 0;
        let amb = MomentAmbiguitySet::scalar(-0.036, 0.036, 0.0, 0.1, 0.0625, 1.0).unwrap();
        let sol = solve_recursion(&m, &Mode::robust(amb), tcl_grid(), &BackupOptions::default()).unwrap();
        assert_eq!(sol.values.len(), 1);
        assert_eq!(sol.values[0], terminal(tcl_grid(), 0));
    }
}
