//! Brute-force primal solver for the inner worst-case expectation.
//!
//! The infinite-dimensional problem `inf_mu E_mu[g]` over the ambiguity set is
//! restricted to probability vectors on a finite atom grid, which is a small
//! LP. Atomized measures are a subset of the ambiguity set, so the returned
//! value is an upper bound on the true infimum and decreases as the grid is
//! refined. Grids are nested dyadic grids with both endpoints included, so a
//! refined grid always contains the coarser one.

use thiserror::Error;

use crate::ambiguity::{psd_by_minors, MomentAmbiguitySet, NominalDistribution};
use crate::lp::{LinearProgram, LpError, Relation, Sense};
use crate::model::BoxRegion;
use nalgebra::DMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("no feasible distribution on the {atoms_per_dim}-atom grid ({detail}); refine the grid")]
    RefineGrid { atoms_per_dim: usize, detail: String },
    #[error("primal LP failed: {0}")]
    Solver(LpError),
    #[error("invalid oracle input: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct PrimalSolution {
    /// Optimal value of the atomized LP.
    pub value: f64,
    pub atoms: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// False when `l > 1` and the optimal atom distribution violates a 2x2
    /// principal-minor test of the second-moment cone (the LP only enforces
    /// the diagonal).
    pub cone_exact: bool,
}

/// Number of intervals per dimension used for a requested atom count: the
/// next power of two. The grid has one more point than intervals.
pub fn dyadic_intervals(atoms_per_dim: usize) -> usize {
    atoms_per_dim.max(2).next_power_of_two()
}

/// Nested dyadic grid on the box; first coordinate varies slowest.
pub fn dyadic_grid(support: &BoxRegion, atoms_per_dim: usize) -> Vec<Vec<f64>> {
    let k = dyadic_intervals(atoms_per_dim);
    let axes: Vec<Vec<f64>> = (0..support.dim())
        .map(|i| {
            let (a, b) = (support.lo()[i], support.hi()[i]);
            (0..=k)
                .map(|j| if j == k { b } else { a + (b - a) * (j as f64 / k as f64) })
                .collect()
        })
        .collect();
    let mut pts: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in &axes {
        pts = pts
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    pts.dedup();
    pts
}

/// Worst-case expectation of `payoff` over atomized members of `amb`.
pub fn primal_value<F>(amb: &MomentAmbiguitySet, payoff: F, atoms_per_dim: usize) -> Result<PrimalSolution, OracleError>
where
    F: Fn(&[f64]) -> f64,
{
    let atoms = dyadic_grid(amb.support(), atoms_per_dim);
    let payoffs: Vec<f64> = atoms.iter().map(|w| payoff(w)).collect();
    primal_value_on_atoms(amb, atoms, &payoffs).map_err(|e| match e {
        OracleError::RefineGrid { detail, .. } => OracleError::RefineGrid { atoms_per_dim, detail },
        other => other,
    })
}

/// Same LP on caller-supplied atoms (which must lie in the support).
pub fn primal_value_on_atoms(
    amb: &MomentAmbiguitySet,
    atoms: Vec<Vec<f64>>,
    payoffs: &[f64],
) -> Result<PrimalSolution, OracleError> {
    let l = amb.dim();
    if atoms.len() < 2 {
        return Err(OracleError::Invalid("need at least two atoms".into()));
    }
    if atoms.len() != payoffs.len() {
        return Err(OracleError::Invalid("atoms and payoffs differ in length".into()));
    }
    if let Some(p) = atoms.iter().find(|p| !amb.support().contains(p)) {
        return Err(OracleError::Invalid(format!("atom {p:?} outside the support")));
    }
    if payoffs.iter().any(|g| !g.is_finite()) {
        return Err(OracleError::Invalid("payoff is not finite".into()));
    }
    let n = atoms.len();
    let mean = amb.mean();
    let tol = amb.mean_tol();
    let mut lp = LinearProgram::new(Sense::Minimize, payoffs.to_vec());
    lp.add_constraint(vec![1.0; n], Relation::Eq, 1.0);
    for i in 0..l {
        let row: Vec<f64> = atoms.iter().map(|p| p[i]).collect();
        lp.add_constraint(row.clone(), Relation::Le, mean[i] + tol[i]);
        lp.add_constraint(row, Relation::Ge, mean[i] - tol[i]);
    }
    for i in 0..l {
        let row: Vec<f64> = atoms.iter().map(|p| (p[i] - mean[i]).powi(2)).collect();
        lp.add_constraint(row, Relation::Le, amb.moment_budget(i));
    }
    let sol = match lp.solve() {
        Ok(s) => s,
        Err(LpError::Infeasible { residual }) => {
            return Err(OracleError::RefineGrid {
                atoms_per_dim: n,
                detail: format!("phase-one residual {residual:.3e}"),
            })
        }
        Err(e) => return Err(OracleError::Solver(e)),
    };
    let weights: Vec<f64> = sol.x.iter().map(|p| p.max(0.0)).collect();
    let cone_exact = l == 1 || {
        let mut mom = DMatrix::<f64>::zeros(l, l);
        for (p, w) in atoms.iter().zip(&weights) {
            for i in 0..l {
                for j in 0..l {
                    mom[(i, j)] += w * (p[i] - mean[i]) * (p[j] - mean[j]);
                }
            }
        }
        psd_by_minors(&(amb.scale() * amb.second_moment() - mom), 1e-9)
    };
    let (lo, hi) = payoffs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &g| (a.min(g), b.max(g)));
    Ok(PrimalSolution {
        value: sol.objective.clamp(lo, hi),
        atoms,
        weights,
        cone_exact,
    })
}

/// Plain expectation under a fixed law, by midpoint-rule quadrature.
pub fn nominal_expectation<F>(nom: &NominalDistribution, payoff: F, atoms_per_dim: usize) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    nom.singleton(atoms_per_dim).expectation(payoff)
}
