//! Monte Carlo closed-loop evaluation of a safety-oriented controller.
//!
//! Trajectory `i` of a run with seed `s` draws its disturbances from a
//! ChaCha8 stream seeded with `s` and positioned on stream number `i`, so
//! every trajectory is reproducible on its own and the report does not
//! depend on how rollouts are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ambiguity::NominalDistribution;
use crate::policy::{Branch, SafetyOrientedController};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<usize>,
    pub branches: Vec<Branch>,
    pub safe: bool,
}

/// Five-number summary for a Tukey box plot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageQuantiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub samples: usize,
    pub safe_count: usize,
    pub probability: f64,
    /// Quantiles of the first state coordinate per stage `t = 0..=T`.
    pub quantiles: Vec<StageQuantiles>,
    pub seed: u64,
}

impl SimulationReport {
    /// Binomial standard error of `probability`.
    pub fn standard_error(&self) -> f64 {
        let p = self.probability;
        (p * (1.0 - p) / self.samples as f64).sqrt()
    }
}

pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Closed-loop rollout from `x0` over the controller's horizon. The
/// trajectory is safe iff every state `x_0..x_T` lies in `A`.
pub fn rollout(
    controller: &SafetyOrientedController,
    true_dist: &NominalDistribution,
    x0: &[f64],
    seed: u64,
    index: u64,
) -> Trajectory {
    let model = controller.model();
    let horizon = controller.horizon();
    let mut rng = trajectory_rng(seed, index);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    let mut branches = Vec::with_capacity(horizon);
    let mut x = x0.to_vec();
    let mut safe = model.safe_region.contains(&x);
    for t in 0..horizon {
        let d = controller.act(&x, t);
        let w = true_dist.sample(&mut rng);
        let next = model.dynamics.step_unchecked(&x, model.controls.get(d.control), &w);
        states.push(std::mem::replace(&mut x, next));
        controls.push(d.control);
        branches.push(d.branch);
        safe &= model.safe_region.contains(&x);
    }
    states.push(x);
    Trajectory {
        states,
        controls,
        branches,
        safe,
    }
}

/// `n` independent rollouts; see the module docs for the seeding scheme.
pub fn monte_carlo(
    controller: &SafetyOrientedController,
    true_dist: &NominalDistribution,
    x0: &[f64],
    n: usize,
    seed: u64,
) -> SimulationReport {
    monte_carlo_with_trajectories(controller, true_dist, x0, n, seed).0
}

pub fn monte_carlo_with_trajectories(
    controller: &SafetyOrientedController,
    true_dist: &NominalDistribution,
    x0: &[f64],
    n: usize,
    seed: u64,
) -> (SimulationReport, Vec<Trajectory>) {
    let n = n.max(1);
    if !true_dist
        .support()
        .lo()
        .iter()
        .zip(true_dist.support().hi())
        .all(|(a, b)| a <= b)
    {
        log::warn!("true distribution has an empty support");
    }
    let trajectories: Vec<Trajectory> = (0..n as u64)
        .into_par_iter()
        .map(|i| rollout(controller, true_dist, x0, seed, i))
        .collect();
    let safe_count = trajectories.iter().filter(|t| t.safe).count();
    let horizon = controller.horizon();
    let quantiles = (0..=horizon)
        .map(|t| {
            let mut xs: Vec<f64> = trajectories.iter().map(|tr| tr.states[t][0]).collect();
            xs.sort_by(f64::total_cmp);
            StageQuantiles {
                min: xs[0],
                q1: quantile(&xs, 0.25),
                median: quantile(&xs, 0.5),
                q3: quantile(&xs, 0.75),
                max: xs[xs.len() - 1],
            }
        })
        .collect();
    let report = SimulationReport {
        samples: n,
        safe_count,
        probability: safe_count as f64 / n as f64,
        quantiles,
        seed,
    };
    (report, trajectories)
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}
