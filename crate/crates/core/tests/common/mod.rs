#![allow(dead_code)]

use std::sync::Arc;

use drsafe::bellman::{backup, BackupOptions, Solution, StageMode, StateGrid, ValueFunction};
use drsafe::config::RunConfig;
use drsafe::dual_sip::PiecewiseLinear;
use drsafe::{solve_recursion, BoxRegion, Model, MomentAmbiguitySet};
use rand::Rng;

pub const TCL_LITERAL: &str = include_str!("../../../../configs/tcl.cfg");
pub const TCL_MATCHED: &str = include_str!("../../../../configs/tcl_matched.cfg");
pub const AFFINE_CONCAVE: &str = include_str!("../../../../configs/affine_concave.cfg");

pub fn config(src: &str) -> RunConfig {
    RunConfig::parse(src).expect("shipped config parses")
}

pub struct Fixture {
    pub cfg: RunConfig,
    pub model: Model,
    pub grid: Arc<StateGrid>,
}

impl Fixture {
    pub fn new(src: &str) -> Self {
        let cfg = config(src);
        let model = cfg.build_model();
        let grid = cfg.build_grid(&model);
        Self { cfg, model, grid }
    }

    pub fn shared_ambiguity(&self) -> MomentAmbiguitySet {
        match self.cfg.ambiguity_schedule(None, None).unwrap() {
            drsafe::Schedule::Shared(a) => a,
            drsafe::Schedule::PerStage(v) => v[0].clone(),
        }
    }

    pub fn robust(&self) -> Solution {
        solve_recursion(
            &self.model,
            &self.cfg.robust_mode().unwrap(),
            self.grid.clone(),
            &self.cfg.backup_options(),
        )
        .unwrap()
    }

    pub fn robust_with(&self, b: f64, c: f64) -> Solution {
        let mode = drsafe::Mode::Robust(self.cfg.ambiguity_schedule(Some(b), Some(c)).unwrap());
        solve_recursion(&self.model, &mode, self.grid.clone(), &self.cfg.backup_options()).unwrap()
    }

    pub fn nominal(&self) -> Solution {
        solve_recursion(
            &self.model,
            &self.cfg.nominal_mode(),
            self.grid.clone(),
            &self.cfg.backup_options(),
        )
        .unwrap()
    }

    /// `v_t` restricted to the first control at stage `t` only.
    pub fn pinned_backup(&self, v_next: &ValueFunction, amb: &MomentAmbiguitySet, control: usize) -> ValueFunction {
        let opts = BackupOptions {
            pinned_control: Some(control),
            ..self.cfg.backup_options()
        };
        backup(v_next, &self.model, StageMode::Robust(amb), &opts)
            .unwrap()
            .values
    }
}

/// Random scalar ambiguity set; a point mass at `m` is always a member.
pub fn random_ambiguity<R: Rng>(rng: &mut R) -> MomentAmbiguitySet {
    let lo: f64 = -rng.random_range(0.2..2.0);
    let hi: f64 = rng.random_range(0.2..2.0);
    let width = hi - lo;
    let m = rng.random_range(lo * 0.5..hi * 0.5);
    let b = rng.random_range(0.0..0.3 * width);
    let sigma2 = rng.random_range(0.05..1.0) * (width / 2.0).powi(2);
    let c = rng.random_range(1.0..4.0);
    MomentAmbiguitySet::scalar(lo, hi, m, b, sigma2, c).unwrap()
}

/// Continuous piecewise-linear payoff in [0, 1] with `k` breakpoints, all of
/// them on the `intervals`-dyadic grid of `[lo, hi]` (endpoints included).
pub fn random_payoff<R: Rng>(rng: &mut R, support: &BoxRegion, k: usize, intervals: usize) -> PiecewiseLinear {
    let (a, b) = (support.lo()[0], support.hi()[0]);
    let mut idx: Vec<usize> = (0..k - 2).map(|_| rng.random_range(1..intervals)).collect();
    idx.push(0);
    idx.push(intervals);
    idx.sort_unstable();
    idx.dedup();
    let xs: Vec<f64> = idx
        .iter()
        .map(|&j| {
            if j == intervals {
                b
            } else {
                a + (b - a) * (j as f64 / intervals as f64)
            }
        })
        .collect();
    let ys: Vec<f64> = xs.iter().map(|_| rng.random_range(0.0..=1.0)).collect();
    PiecewiseLinear::from_breakpoints(&xs, &ys).unwrap()
}

/// Nodes of `{x : v(x) > 0}`.
pub fn positive_nodes(v: &ValueFunction) -> Vec<bool> {
    v.values().iter().map(|&x| x > 0.0).collect()
}
