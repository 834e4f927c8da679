mod common;

use std::sync::{Arc, OnceLock};

use common::{random_ambiguity, random_payoff, Fixture, TCL_MATCHED};
use drsafe::bellman::{backup, BackupOptions, StageMode, StateGrid, ValueFunction};
use drsafe::cli::{build_controller, verification_grid};
use drsafe::config::SolveKind;
use drsafe::lp::{LinearProgram, Relation, Sense};
use drsafe::oracle::primal_value;
use drsafe::{
    solve_dual, threshold, BoxRegion, ControlSet, Dynamics, Fallback, Model, MomentAmbiguitySet, NominalDistribution,
    Payoff, SafetyOrientedController, SipOptions, Solution,
};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64) -> (MomentAmbiguitySet, drsafe::PiecewiseLinear) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amb = random_ambiguity(&mut rng);
    let k = 5 + (seed % 16) as usize;
    let pwl = random_payoff(&mut rng, amb.support(), k, 64);
    (amb, pwl)
}

fn primal(amb: &MomentAmbiguitySet, pwl: &drsafe::PiecewiseLinear, atoms: usize) -> f64 {
    primal_value(amb, |w| pwl.eval(w[0]), atoms).unwrap().value
}

fn dual(amb: &MomentAmbiguitySet, pwl: &drsafe::PiecewiseLinear) -> drsafe::DualCertificate {
    solve_dual(&Payoff::Piecewise(pwl.clone()), amb, &SipOptions::default()).unwrap()
}

fn matched() -> &'static (Fixture, Solution) {
    static CELL: OnceLock<(Fixture, Solution)> = OnceLock::new();
    CELL.get_or_init(|| {
        let fx = Fixture::new(TCL_MATCHED);
        let sol = fx.robust();
        (fx, sol)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn refinement_never_raises_the_primal(seed in any::<u64>()) {
        let (amb, pwl) = instance(seed);
        let mut prev = primal(&amb, &pwl, 9);
        for atoms in [17, 33, 65, 129] {
            let next = primal(&amb, &pwl, atoms);
            prop_assert!(next <= prev + 1e-9, "{atoms} atoms: {next} > {prev}");
            prev = next;
        }
    }

    #[test]
    fn weak_duality_at_every_resolution(seed in any::<u64>()) {
        let (amb, pwl) = instance(seed);
        let d = dual(&amb, &pwl).value;
        for atoms in [8, 64, 256] {
            let p = primal(&amb, &pwl, atoms);
            prop_assert!(d <= p + 1e-6, "dual {d} above primal {p} at {atoms} atoms");
        }
    }

    #[test]
    fn larger_sets_never_raise_either_route(seed in any::<u64>(), db in 0.0..0.3f64, dc in 0.0..2.0f64) {
        let (amb, pwl) = instance(seed);
        let b = amb.mean_tol()[0];
        let wider = amb.with_mean_tol(vec![b + db]).unwrap().with_scale(amb.scale() + dc).unwrap();
        prop_assert!(primal(&wider, &pwl, 64) <= primal(&amb, &pwl, 64) + 1e-9);
        prop_assert!(dual(&wider, &pwl).value <= dual(&amb, &pwl).value + 1e-8);
    }

    #[test]
    fn exchange_objective_decreases_and_certificate_holds(seed in any::<u64>()) {
        let (amb, pwl) = instance(seed);
        let cert = dual(&amb, &pwl);
        prop_assert!(cert.converged);
        for pair in cert.objective_history.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-10, "{:?}", cert.objective_history);
        }
        let opts = SipOptions::default();
        let worst = verification_grid(amb.support(), 4 * opts.scan_points)
            .iter()
            .map(|w| cert.multipliers.constraint(&amb, w, pwl.eval(w[0])))
            .fold(f64::INFINITY, f64::min);
        prop_assert!(worst >= -10.0 * opts.feas_tol, "residual {worst}");
    }

    #[test]
    fn singleton_weights_are_a_distribution(
        lo in -2.0..-0.1f64,
        hi in 0.1..2.0f64,
        mean in -0.5..0.5f64,
        std in 0.01..3.0f64,
        atoms in 2usize..300,
    ) {
        let support = BoxRegion::interval(lo, hi).unwrap();
        for nom in [
            NominalDistribution::uniform(support.clone()),
            NominalDistribution::truncated_normal(vec![mean], vec![std], support.clone()).unwrap(),
        ] {
            let list = nom.singleton(atoms);
            let total: f64 = list.weights.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12, "sum {total}");
            prop_assert!(list.weights.iter().all(|&p| p >= 0.0));
            prop_assert!(list.points.iter().all(|w| support.contains(w)));
        }
    }

    #[test]
    fn enlarging_keeps_feasibility(seed in any::<u64>(), db in 0.0..1.0f64, dc in 0.0..3.0f64) {
        let (amb, _) = instance(seed);
        prop_assume!(amb.check_feasible().unwrap().feasible);
        let wider = amb.with_mean_tol(vec![amb.mean_tol()[0] + db]).unwrap().with_scale(amb.scale() + dc).unwrap();
        prop_assert!(wider.check_feasible().unwrap().feasible);
    }
}

/// Brute-force LP: every vertex of `{x >= 0, A x <= b}` in three variables.
fn vertex_enumeration(a: &[[f64; 3]], b: &[f64], c: &[f64; 3]) -> f64 {
    let mut planes: Vec<([f64; 3], f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    for i in 0..3 {
        let mut e = [0.0; 3];
        e[i] = -1.0;
        planes.push((e, 0.0));
    }
    let mut best = f64::NEG_INFINITY;
    let n = planes.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let rows = [planes[i], planes[j], planes[k]];
                let m = Matrix3::from_fn(|r, col| rows[r].0[col]);
                let Some(x) = m.lu().solve(&Vector3::new(rows[0].1, rows[1].1, rows[2].1)) else {
                    continue;
                };
                let feasible = planes
                    .iter()
                    .all(|(row, rhs)| row[0] * x[0] + row[1] * x[1] + row[2] * x[2] <= rhs + 1e-9);
                if feasible {
                    best = best.max(c[0] * x[0] + c[1] * x[1] + c[2] * x[2]);
                }
            }
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn simplex_matches_vertex_enumeration(
        a in proptest::collection::vec(proptest::array::uniform3(0.0..5.0f64), 4),
        b in proptest::collection::vec(0.5..10.0f64, 4),
        c in proptest::array::uniform3(-3.0..3.0f64),
    ) {
        let mut rows = a.clone();
        let mut rhs = b.clone();
        rows.push([1.0, 1.0, 1.0]);
        rhs.push(20.0);
        let mut lp = LinearProgram::new(Sense::Maximize, c.to_vec());
        for (row, r) in rows.iter().zip(&rhs) {
            lp.add_constraint(row.to_vec(), Relation::Le, *r);
        }
        let sol = lp.solve().unwrap();
        let brute = vertex_enumeration(&rows, &rhs, &c);
        prop_assert!((sol.objective - brute).abs() <= 1e-7 * (1.0 + brute.abs()), "{} vs {brute}", sol.objective);
        prop_assert!(sol.x.iter().all(|&v| v >= -1e-9));
    }
}

fn small_grid(model: &Model) -> Arc<StateGrid> {
    let bounds = BoxRegion::interval(18.0, 23.0).unwrap();
    Arc::new(StateGrid::new(&bounds, &[61], &model.safe_region).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn backup_is_monotone(upper in proptest::collection::vec(0.0..=1.0f64, 61), scale in proptest::collection::vec(0.0..=1.0f64, 61)) {
        let model = drsafe::tcl_preset();
        let grid = small_grid(&model);
        let clamp = |k: usize, v: f64| if grid.node_in_region(k) { v } else { 0.0 };
        let hi: Vec<f64> = upper.iter().enumerate().map(|(k, &v)| clamp(k, v)).collect();
        let lo: Vec<f64> = hi.iter().zip(&scale).map(|(v, s)| v * s).collect();
        let v_hi = ValueFunction::from_values(1, grid.clone(), hi).unwrap();
        let v_lo = ValueFunction::from_values(1, grid.clone(), lo).unwrap();
        let amb = matched().0.shared_ambiguity();
        let opts = BackupOptions::default();
        let b_hi = backup(&v_hi, &model, StageMode::Robust(&amb), &opts).unwrap();
        let b_lo = backup(&v_lo, &model, StageMode::Robust(&amb), &opts).unwrap();
        for (l, h) in b_lo.values.values().iter().zip(b_hi.values.values()) {
            prop_assert!(l <= &(h + 1e-8), "{l} > {h}");
        }
    }

    #[test]
    fn safe_sets_nest_in_alpha_and_time(a1 in 0.01..=1.0f64, a2 in 0.01..=1.0f64) {
        let (fx, sol) = matched();
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let loose = threshold(&sol.values, lo).unwrap();
        let tight = threshold(&sol.values, hi).unwrap();
        for t in 0..=fx.model.horizon {
            for k in 0..fx.grid.len() {
                prop_assert!(!tight.node_member(t, k) || loose.node_member(t, k));
                if t < fx.model.horizon {
                    prop_assert!(!loose.node_member(t, k) || loose.node_member(t + 1, k));
                }
                if loose.node_member(t, k) {
                    prop_assert!(sol.values[t].value_at_node(k) >= lo);
                }
            }
        }
    }

    #[test]
    fn tcl_controller_output_is_admissible(x in 17.0..24.0f64, t in 0usize..18) {
        let (fx, sol) = matched();
        let ctl = build_controller(&fx.cfg, SolveKind::Robust, sol).unwrap();
        prop_assert!(ctl.act(&[x], t).control < fx.model.controls.len());
    }
}

/// Scalar integrator whose upward controls are forbidden in the upper half of
/// the box, so nearest-node tables can name a control that is inadmissible
/// at an off-node state.
fn restricted_controller() -> SafetyOrientedController {
    let dynamics = Dynamics::from_fn(1, 1, 1, |x, u, w| vec![x[0] + 0.1 * u[0] + w[0]]);
    let controls = ControlSet::uniform_interval(-1.0, 1.0, 5)
        .unwrap()
        .with_admissibility(|x, i| x[0] < 0.05 || i <= 2);
    let model = Model::new(dynamics, BoxRegion::interval(-1.0, 1.0).unwrap(), controls, 3).unwrap();
    let bounds = BoxRegion::interval(-1.0, 1.0).unwrap();
    let grid = Arc::new(StateGrid::new(&bounds, &[21], &model.safe_region).unwrap());
    let amb = MomentAmbiguitySet::scalar(-0.05, 0.05, 0.0, 0.01, 1e-3, 1.0).unwrap();
    let sol = drsafe::solve_recursion(
        &model,
        &drsafe::Mode::robust(amb.clone()),
        grid,
        &BackupOptions::default(),
    )
    .unwrap();
    let nodes = sol.values[0].grid().len();
    let fallback = Fallback::Table(vec![vec![4; nodes]; 3]);
    SafetyOrientedController::from_solution(model, &sol, 0.5, fallback, vec![amb.support().clone(); 3]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn restricted_controller_output_is_admissible(x in -1.2..1.2f64, t in 0usize..3) {
        static CTL: OnceLock<SafetyOrientedController> = OnceLock::new();
        let ctl = CTL.get_or_init(restricted_controller);
        let d = ctl.act(&[x], t);
        prop_assert!(ctl.model().controls.is_admissible(&[x], d.control), "x = {x}: control {}", d.control);
    }
}
