//! Distributionally robust safe sets by thresholding value functions, and the
//! safety-oriented controller built from them.

use std::sync::Arc;

use thiserror::Error;

use crate::bellman::{Solution, StateGrid, ValueFunction};
use crate::model::{BoxRegion, Model};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("threshold must lie in (0, 1], got {0}")]
    Threshold(f64),
    #[error("no value functions supplied")]
    Empty,
    #[error("controller configuration: {0}")]
    Config(String),
}

/// Node masks `S_{alpha,t} = {x : v_t(x) >= alpha}` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SafeSetFamily {
    alpha: f64,
    grid: Arc<StateGrid>,
    masks: Vec<Vec<bool>>,
}

/// Thresholds every value function at `alpha` (boundary inclusive).
pub fn threshold(values: &[ValueFunction], alpha: f64) -> Result<SafeSetFamily, PolicyError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(PolicyError::Threshold(alpha));
    }
    let first = values.first().ok_or(PolicyError::Empty)?;
    let masks = values
        .iter()
        .map(|v| v.values().iter().map(|&x| x >= alpha).collect())
        .collect();
    Ok(SafeSetFamily {
        alpha,
        grid: first.grid().clone(),
        masks,
    })
}

impl SafeSetFamily {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn grid(&self) -> &Arc<StateGrid> {
        &self.grid
    }

    /// Number of stages `T` (masks exist for `0..=T`).
    pub fn horizon(&self) -> usize {
        self.masks.len() - 1
    }

    pub fn mask(&self, t: usize) -> &[bool] {
        &self.masks[t]
    }

    pub fn node_member(&self, t: usize, node: usize) -> bool {
        self.masks[t][node]
    }

    /// Conservative membership: every grid vertex carrying weight at `x`
    /// must be a member. Points outside the safe box are never members.
    pub fn contains(&self, t: usize, x: &[f64]) -> bool {
        if !self.grid.region().contains(x) {
            return false;
        }
        self.grid.support_nodes(x).into_iter().all(|k| self.masks[t][k])
    }

    /// Maximal runs of member nodes along a scalar grid, as closed intervals.
    pub fn intervals(&self, t: usize) -> Vec<(f64, f64)> {
        let axis = self.grid.axis(0);
        let mut out = Vec::new();
        let mut start: Option<usize> = None;
        for (k, &m) in self.masks[t].iter().enumerate() {
            match (m, start) {
                (true, None) => start = Some(k),
                (false, Some(s)) => {
                    out.push((axis[s], axis[k - 1]));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push((axis[s], axis[axis.len() - 1]));
        }
        out
    }
}

/// Control used when every admissible action keeps the state in the next
/// safe set.
#[derive(Debug, Clone, PartialEq)]
pub enum Fallback {
    Constant(usize),
    /// Control index per stage and grid node (nearest-node lookup).
    Table(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    /// Every admissible control keeps the next state safe; fallback applied.
    Fallback,
    /// Robust safe policy applied.
    Safe,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Fallback => "fallback",
            Branch::Safe => "safe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub control: usize,
    pub branch: Branch,
}

/// Safety-oriented controller: fallback control when every admissible action
/// lands in `S_{alpha,t+1}` for every disturbance in `W_t`, robust policy
/// `phi_t` otherwise.
#[derive(Debug, Clone)]
pub struct SafetyOrientedController {
    model: Model,
    safe_sets: SafeSetFamily,
    policies: Vec<Vec<usize>>,
    fallback: Fallback,
    supports: Vec<BoxRegion>,
}

impl SafetyOrientedController {
    pub fn new(
        model: Model,
        safe_sets: SafeSetFamily,
        policies: Vec<Vec<usize>>,
        fallback: Fallback,
        supports: Vec<BoxRegion>,
    ) -> Result<Self, PolicyError> {
        let horizon = safe_sets.horizon();
        if policies.len() != horizon {
            return Err(PolicyError::Config(format!(
                "{} policy tables for horizon {horizon}",
                policies.len()
            )));
        }
        if supports.len() != horizon {
            return Err(PolicyError::Config(format!(
                "{} disturbance supports for horizon {horizon}",
                supports.len()
            )));
        }
        let nodes = safe_sets.grid.len();
        let n_controls = model.controls.len();
        for (t, p) in policies.iter().enumerate() {
            if p.len() != nodes || p.iter().any(|&u| u >= n_controls) {
                return Err(PolicyError::Config(format!("policy table {t} is malformed")));
            }
        }
        match &fallback {
            Fallback::Constant(u) if *u >= n_controls => {
                return Err(PolicyError::Config(format!("fallback control {u} does not exist")))
            }
            Fallback::Table(tab)
                if tab.len() != horizon
                    || tab
                        .iter()
                        .any(|r| r.len() != nodes || r.iter().any(|&u| u >= n_controls)) =>
            {
                return Err(PolicyError::Config("fallback table is malformed".into()))
            }
            _ => {}
        }
        if supports.iter().any(|s| s.dim() != model.dynamics.disturbance_dim()) {
            return Err(PolicyError::Config("support dimension mismatch".into()));
        }
        Ok(Self {
            model,
            safe_sets,
            policies,
            fallback,
            supports,
        })
    }

    /// Controller from a solved recursion, thresholded at `alpha`.
    pub fn from_solution(
        model: Model,
        solution: &Solution,
        alpha: f64,
        fallback: Fallback,
        supports: Vec<BoxRegion>,
    ) -> Result<Self, PolicyError> {
        let sets = threshold(&solution.values, alpha)?;
        Self::new(model, sets, solution.policies.clone(), fallback, supports)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn safe_sets(&self) -> &SafeSetFamily {
        &self.safe_sets
    }

    pub fn horizon(&self) -> usize {
        self.safe_sets.horizon()
    }

    pub fn policies(&self) -> &[Vec<usize>] {
        &self.policies
    }

    /// True iff for every admissible `u` and every probed `w` in `W_t`,
    /// `f(x, u, w)` is (conservatively) in `S_{alpha,t+1}`. The probe is the
    /// corners and midpoints of `W_t`; for a scalar state the whole segment
    /// spanned by the probed images is checked, which is exact for dynamics
    /// monotone in `w` (e.g. affine).
    pub fn all_safe_next(&self, x: &[f64], t: usize) -> bool {
        let probes = self.supports[t].probe_points();
        let scalar = self.model.dynamics.state_dim() == 1;
        for u in self.model.controls.admissible_indices(x) {
            let uv = self.model.controls.get(u);
            let images: Vec<Vec<f64>> = probes
                .iter()
                .map(|w| self.model.dynamics.step_unchecked(x, uv, w))
                .collect();
            if scalar {
                let lo = images.iter().map(|y| y[0]).fold(f64::INFINITY, f64::min);
                let hi = images.iter().map(|y| y[0]).fold(f64::NEG_INFINITY, f64::max);
                if !self.segment_safe(t + 1, lo, hi) {
                    return false;
                }
            } else if !images.iter().all(|y| self.safe_sets.contains(t + 1, y)) {
                return false;
            }
        }
        true
    }

    fn segment_safe(&self, t: usize, lo: f64, hi: f64) -> bool {
        if !self.safe_sets.contains(t, &[lo]) || !self.safe_sets.contains(t, &[hi]) {
            return false;
        }
        let axis = self.safe_sets.grid.axis(0);
        let start = axis.partition_point(|&a| a <= lo);
        let end = axis.partition_point(|&a| a < hi);
        (start..end).all(|k| self.safe_sets.masks[t][k])
    }

    /// Tabulated controls come from the nearest node; one that is not
    /// admissible at `x` itself is replaced by the lowest admissible index.
    pub fn act(&self, x: &[f64], t: usize) -> Decision {
        let node = self.safe_sets.grid.nearest_node(x);
        let admissible = self.model.controls.admissible_indices(x);
        let clip = |wanted: usize| {
            if admissible.contains(&wanted) {
                wanted
            } else {
                admissible.first().copied().unwrap_or(wanted)
            }
        };
        if self.all_safe_next(x, t) {
            let wanted = match &self.fallback {
                Fallback::Constant(u) => *u,
                Fallback::Table(tab) => tab[t][node],
            };
            return Decision {
                control: clip(wanted),
                branch: Branch::Fallback,
            };
        }
        Decision {
            control: clip(self.policies[t][node]),
            branch: Branch::Safe,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bellman::terminal;
    use crate::model::tcl_preset;

    fn tcl_grid(model: &Model) -> Arc<StateGrid> {
        let bounds = BoxRegion::interval(18.0, 23.0).unwrap();
        Arc::new(StateGrid::new(&bounds, &[101], &model.safe_region).unwrap())
    }

    /// Family whose every stage is the same mask.
    fn constant_family(model: &Model, member: impl Fn(f64) -> bool) -> SafeSetFamily {
        let grid = tcl_grid(model);
        let values: Vec<f64> = (0..grid.len())
            .map(|k| {
                if grid.node_in_region(k) && member(grid.axis(0)[k]) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let vs: Vec<ValueFunction> = (0..=model.horizon)
            .map(|t| ValueFunction::from_values(t, grid.clone(), values.clone()).unwrap())
            .collect();
        threshold(&vs, 0.5).unwrap()
    }

    fn controller(model: &Model, sets: SafeSetFamily, half_width: f64) -> SafetyOrientedController {
        let nodes = sets.grid().len();
        let policies = vec![vec![1; nodes]; model.horizon];
        let supports = vec![BoxRegion::interval(-half_width, half_width).unwrap(); model.horizon];
        SafetyOrientedController::new(model.clone(), sets, policies, Fallback::Constant(0), supports).unwrap()
    }

    #[test]
    fn threshold_bounds() {
        let model = tcl_preset();
        let v = vec![terminal(tcl_grid(&model), 0)];
        assert_eq!(threshold(&v, 1.0 + 1e-12), Err(PolicyError::Threshold(1.0 + 1e-12)));
        assert!(threshold(&v, 0.0).is_err());
        assert!(threshold(&[], 0.5).is_err());
        let grid = tcl_grid(&model);
        let vals: Vec<f64> = (0..grid.len())
            .map(|k| match grid.axis(0)[k] {
                _ if !grid.node_in_region(k) => 0.0,
                x if x < 20.0 => 0.99,
                _ => 1.0,
            })
            .collect();
        let half = ValueFunction::from_values(0, grid.clone(), vals).unwrap();
        let sets = threshold(&[half], 1.0).unwrap();
        let kept: Vec<f64> = (0..grid.len())
            .filter(|&k| sets.node_member(0, k))
            .map(|k| grid.axis(0)[k])
            .collect();
        assert!(kept.iter().all(|&x| (20.0..=22.0).contains(&x)));
        assert_eq!(sets.intervals(0), vec![(20.0, 22.0)]);
    }

    #[test]
    fn tiny_alpha_at_terminal_stage_is_the_safe_box() {
        let model = tcl_preset();
        let grid = tcl_grid(&model);
        let sets = threshold(&[terminal(grid.clone(), 0)], f64::MIN_POSITIVE).unwrap();
        for k in 0..grid.len() {
            assert_eq!(sets.node_member(0, k), grid.node_in_region(k));
        }
        assert_eq!(sets.intervals(0), vec![(19.0, 22.0)]);
    }

    #[test]
    fn off_node_membership_is_conservative() {
        let model = tcl_preset();
        let sets = constant_family(&model, |x| (19.0..=20.0 + 1e-9).contains(&x));
        assert!(sets.contains(0, &[19.5]));
        assert!(sets.contains(0, &[20.0]));
        assert!(!sets.contains(0, &[20.01]));
        assert!(!sets.contains(0, &[18.9]));
    }

    #[test]
    fn everything_safe_with_tiny_noise_uses_fallback() {
        let model = tcl_preset();
        let sets = constant_family(&model, |x| (19.0..=22.0).contains(&x));
        let ctl = controller(&model, sets, 1e-3);
        assert!(ctl.all_safe_next(&[20.5], 0));
        let d = ctl.act(&[20.5], 0);
        assert_eq!((d.control, d.branch), (0, Branch::Fallback));
    }

    #[test]
    fn empty_next_set_never_allows_fallback() {
        let model = tcl_preset();
        let sets = constant_family(&model, |_| false);
        let ctl = controller(&model, sets, 1e-3);
        for x in [18.0, 19.0, 20.5, 22.0, 23.0] {
            assert!(!ctl.all_safe_next(&[x], 3));
            let d = ctl.act(&[x], 3);
            assert_eq!((d.control, d.branch), (1, Branch::Safe));
        }
    }

    #[test]
    fn malformed_tables_are_rejected() {
        let model = tcl_preset();
        let sets = constant_family(&model, |_| true);
        let nodes = sets.grid().len();
        let supports = vec![BoxRegion::interval(-0.1, 0.1).unwrap(); model.horizon];
        let bad_policy = vec![vec![2; nodes]; model.horizon];
        assert!(SafetyOrientedController::new(
            model.clone(),
            sets.clone(),
            bad_policy,
            Fallback::Constant(0),
            supports.clone()
        )
        .is_err());
        let ok_policy = vec![vec![0; nodes]; model.horizon];
        assert!(SafetyOrientedController::new(model, sets, ok_policy, Fallback::Constant(5), supports).is_err());
    }
}
