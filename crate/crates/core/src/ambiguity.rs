//! Moment-based ambiguity sets and nominal (single) disturbance distributions.
//!
//! A [`MomentAmbiguitySet`] is the set of probability measures `mu` on a
//! support box `W` with
//!
//! ```text
//! |E_mu[w_i] - m_i| <= b_i                  (componentwise mean interval)
//! E_mu[(w - m)(w - m)^T]  <=  c * Sigma     (second-moment cone, c >= 1)
//! ```

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::lp::LpError;
use crate::model::{BoxRegion, ModelError};
use crate::oracle;

/// Atoms per dimension used to certify that an ambiguity set is nonempty.
pub const FEASIBILITY_ATOMS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AmbiguityError {
    #[error("invalid ambiguity set: {0}")]
    Invalid(String),
    #[error(transparent)]
    Region(#[from] ModelError),
    #[error("ambiguity set has no feasible distribution on a {atoms_per_dim}-atom-per-dimension grid; retry with a finer grid")]
    Infeasible { atoms_per_dim: usize },
    #[error("feasibility LP failed: {0}")]
    Solver(LpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentAmbiguitySet {
    support: BoxRegion,
    mean: Vec<f64>,
    mean_tol: Vec<f64>,
    second_moment: DMatrix<f64>,
    scale: f64,
}

/// Outcome of [`MomentAmbiguitySet::check_feasible`].
#[derive(Debug, Clone)]
pub struct Feasibility {
    pub feasible: bool,
    pub atoms_per_dim: usize,
    /// A feasible atom distribution `(point, weight)` when `feasible`.
    pub witness: Option<Vec<(Vec<f64>, f64)>>,
}

impl MomentAmbiguitySet {
    /// Validates the fields and certifies feasibility on the default grid.
    pub fn new(
        support: BoxRegion,
        mean: Vec<f64>,
        mean_tol: Vec<f64>,
        second_moment: DMatrix<f64>,
        scale: f64,
    ) -> Result<Self, AmbiguityError> {
        let set = Self::unchecked(support, mean, mean_tol, second_moment, scale)?;
        let report = set.check_feasible()?;
        if !report.feasible {
            return Err(AmbiguityError::Infeasible {
                atoms_per_dim: report.atoms_per_dim,
            });
        }
        Ok(set)
    }

    /// Validates the fields but does not check that the set is nonempty.
    pub fn unchecked(
        support: BoxRegion,
        mean: Vec<f64>,
        mean_tol: Vec<f64>,
        second_moment: DMatrix<f64>,
        scale: f64,
    ) -> Result<Self, AmbiguityError> {
        let l = support.dim();
        if mean.len() != l || mean_tol.len() != l {
            return Err(AmbiguityError::Invalid(format!(
                "mean and mean_tol must have length {l}"
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(AmbiguityError::Invalid("mean is not finite".into()));
        }
        if mean_tol.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(AmbiguityError::Invalid(format!(
                "mean_tol must be componentwise >= 0, got {mean_tol:?}"
            )));
        }
        if !(scale.is_finite() && scale >= 1.0) {
            return Err(AmbiguityError::Invalid(format!("scale must be >= 1, got {scale}")));
        }
        if second_moment.nrows() != l || second_moment.ncols() != l {
            return Err(AmbiguityError::Invalid(format!("second_moment must be {l}x{l}")));
        }
        if second_moment.iter().any(|v| !v.is_finite()) {
            return Err(AmbiguityError::Invalid("second_moment is not finite".into()));
        }
        let asym = (&second_moment - second_moment.transpose()).abs().max();
        if asym > 1e-12 * (1.0 + second_moment.abs().max()) {
            return Err(AmbiguityError::Invalid("second_moment is not symmetric".into()));
        }
        let eig = SymmetricEigen::new(second_moment.clone());
        if eig.eigenvalues.iter().any(|&e| e < -1e-10) {
            return Err(AmbiguityError::Invalid(format!(
                "second_moment is not positive semidefinite (eigenvalues {:?})",
                eig.eigenvalues.as_slice()
            )));
        }
        let clamped = eig.eigenvalues.map(|e| e.max(0.0));
        let mut sigma = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
        sigma = 0.5 * (&sigma + sigma.transpose());
        if clamped == eig.eigenvalues {
            sigma = second_moment;
        }
        Ok(Self {
            support,
            mean,
            mean_tol,
            second_moment: sigma,
            scale,
        })
    }

    /// Scalar set: `W = [lo, hi]`, `|E w - m| <= b`, `E (w - m)^2 <= c * sigma2`.
    pub fn scalar(lo: f64, hi: f64, m: f64, b: f64, sigma2: f64, c: f64) -> Result<Self, AmbiguityError> {
        Self::new(
            BoxRegion::interval(lo, hi)?,
            vec![m],
            vec![b],
            DMatrix::from_element(1, 1, sigma2),
            c,
        )
    }

    pub fn dim(&self) -> usize {
        self.support.dim()
    }

    pub fn support(&self) -> &BoxRegion {
        &self.support
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn mean_tol(&self) -> &[f64] {
        &self.mean_tol
    }

    pub fn second_moment(&self) -> &DMatrix<f64> {
        &self.second_moment
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `b - m`, the weight of the lower mean multiplier in the dual objective.
    pub fn lower_offset(&self) -> Vec<f64> {
        self.mean_tol.iter().zip(&self.mean).map(|(b, m)| b - m).collect()
    }

    /// `b + m`, the weight of the upper mean multiplier in the dual objective.
    pub fn upper_offset(&self) -> Vec<f64> {
        self.mean_tol.iter().zip(&self.mean).map(|(b, m)| b + m).collect()
    }

    /// `c * Sigma_ii`, the per-coordinate second-moment budget.
    pub fn moment_budget(&self, i: usize) -> f64 {
        self.scale * self.second_moment[(i, i)]
    }

    /// Same set with a different mean tolerance (feasibility is preserved
    /// when the tolerance grows).
    pub fn with_mean_tol(&self, mean_tol: Vec<f64>) -> Result<Self, AmbiguityError> {
        Self::new(
            self.support.clone(),
            self.mean.clone(),
            mean_tol,
            self.second_moment.clone(),
            self.scale,
        )
    }

    pub fn with_scale(&self, scale: f64) -> Result<Self, AmbiguityError> {
        Self::new(
            self.support.clone(),
            self.mean.clone(),
            self.mean_tol.clone(),
            self.second_moment.clone(),
            scale,
        )
    }

    /// Solves the atomized feasibility LP on the default 64-atom grid.
    pub fn check_feasible(&self) -> Result<Feasibility, AmbiguityError> {
        self.check_feasible_with(FEASIBILITY_ATOMS)
    }

    pub fn check_feasible_with(&self, atoms_per_dim: usize) -> Result<Feasibility, AmbiguityError> {
        match oracle::primal_value(self, |_| 0.0, atoms_per_dim) {
            Ok(sol) => Ok(Feasibility {
                feasible: true,
                atoms_per_dim,
                witness: Some(
                    sol.atoms
                        .into_iter()
                        .zip(sol.weights)
                        .filter(|(_, p)| *p > 0.0)
                        .collect(),
                ),
            }),
            Err(oracle::OracleError::RefineGrid { .. }) => Ok(Feasibility {
                feasible: false,
                atoms_per_dim,
                witness: None,
            }),
            Err(oracle::OracleError::Solver(e)) => Err(AmbiguityError::Solver(e)),
            Err(oracle::OracleError::Invalid(msg)) => Err(AmbiguityError::Invalid(msg)),
        }
    }

    /// Whether a finite atom distribution belongs to the set (within `tol`).
    /// For `l > 1` the cone condition is checked through the diagonal and all
    /// 2x2 principal minors of `c Sigma - M`.
    pub fn contains_atoms(&self, atoms: &AtomList, tol: f64) -> bool {
        let l = self.dim();
        if atoms.points.iter().any(|p| p.len() != l || !self.support.contains(p)) {
            return false;
        }
        let mut mom = DMatrix::<f64>::zeros(l, l);
        for i in 0..l {
            let e: f64 = atoms.points.iter().zip(&atoms.weights).map(|(p, w)| w * p[i]).sum();
            if (e - self.mean[i]).abs() > self.mean_tol[i] + tol {
                return false;
            }
        }
        for (p, w) in atoms.points.iter().zip(&atoms.weights) {
            for i in 0..l {
                for j in 0..l {
                    mom[(i, j)] += w * (p[i] - self.mean[i]) * (p[j] - self.mean[j]);
                }
            }
        }
        let slack = self.scale * &self.second_moment - mom;
        psd_by_minors(&slack, tol)
    }
}

/// Diagonal and 2x2 principal-minor test (exact for `l <= 2`).
pub(crate) fn psd_by_minors(m: &DMatrix<f64>, tol: f64) -> bool {
    let l = m.nrows();
    for i in 0..l {
        if m[(i, i)] < -tol {
            return false;
        }
        for j in i + 1..l {
            let det = m[(i, i)] * m[(j, j)] - m[(i, j)] * m[(j, i)];
            if det < -tol {
                return false;
            }
        }
    }
    true
}

/// Finite distribution: `points[k]` with probability `weights[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomList {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl AtomList {
    pub fn expectation<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.points.iter().zip(&self.weights).map(|(p, w)| w * f(p)).sum()
    }
}

/// A single, fully specified disturbance law.
#[derive(Debug, Clone, PartialEq)]
pub enum NominalDistribution {
    Uniform {
        support: BoxRegion,
    },
    /// Independent normals `N(mean_i, std_i^2)` truncated to the support box.
    /// `std` is the standard deviation of the parent (untruncated) normal.
    TruncatedNormal {
        mean: Vec<f64>,
        std: Vec<f64>,
        support: BoxRegion,
    },
    Atoms {
        atoms: AtomList,
        support: BoxRegion,
    },
}

impl NominalDistribution {
    pub fn uniform(support: BoxRegion) -> Self {
        Self::Uniform { support }
    }

    pub fn truncated_normal(mean: Vec<f64>, std: Vec<f64>, support: BoxRegion) -> Result<Self, AmbiguityError> {
        let l = support.dim();
        if mean.len() != l || std.len() != l {
            return Err(AmbiguityError::Invalid(format!(
                "truncated normal mean/std must have length {l}"
            )));
        }
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(AmbiguityError::Invalid(format!(
                "truncated normal std must be > 0, got {std:?}"
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(AmbiguityError::Invalid("truncated normal mean is not finite".into()));
        }
        Ok(Self::TruncatedNormal { mean, std, support })
    }

    /// Atom list; the support is the bounding box of the points.
    pub fn atoms(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self, AmbiguityError> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(AmbiguityError::Invalid(
                "atom list needs matching, nonempty points and weights".into(),
            ));
        }
        let l = points[0].len();
        if l == 0 || points.iter().any(|p| p.len() != l || p.iter().any(|v| !v.is_finite())) {
            return Err(AmbiguityError::Invalid(
                "atom points have inconsistent dimension".into(),
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(AmbiguityError::Invalid("atom weights must be >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(AmbiguityError::Invalid(format!(
                "atom weights sum to {total}, expected 1"
            )));
        }
        let lo = (0..l)
            .map(|i| points.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min))
            .collect();
        let hi = (0..l)
            .map(|i| points.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Ok(Self::Atoms {
            atoms: AtomList { points, weights },
            support: BoxRegion::new(lo, hi)?,
        })
    }

    pub fn support(&self) -> &BoxRegion {
        match self {
            Self::Uniform { support } | Self::TruncatedNormal { support, .. } | Self::Atoms { support, .. } => support,
        }
    }

    pub fn dim(&self) -> usize {
        self.support().dim()
    }

    /// Deterministic midpoint-rule atomization: each support cell contributes
    /// its midpoint with weight equal to the probability of the cell. Atom
    /// lists pass through unchanged.
    pub fn singleton(&self, atoms_per_dim: usize) -> AtomList {
        let n = atoms_per_dim.max(2);
        let per_dim: Vec<(Vec<f64>, Vec<f64>)> = match self {
            Self::Atoms { atoms, .. } => return atoms.clone(),
            Self::Uniform { support } => (0..support.dim())
                .map(|i| {
                    let (pts, _) = cell_midpoints(support.lo()[i], support.hi()[i], n);
                    (pts, vec![1.0 / n as f64; n])
                })
                .collect(),
            Self::TruncatedNormal { mean, std, support } => (0..support.dim())
                .map(|i| {
                    let (pts, edges) = cell_midpoints(support.lo()[i], support.hi()[i], n);
                    let normal = Normal::new(mean[i], std[i]).expect("validated std");
                    let cdf: Vec<f64> = edges.iter().map(|&e| normal.cdf(e)).collect();
                    let mut w: Vec<f64> = cdf.windows(2).map(|c| (c[1] - c[0]).max(0.0)).collect();
                    let total: f64 = w.iter().sum();
                    if total > 0.0 {
                        w.iter_mut().for_each(|v| *v /= total);
                    } else {
                        w = vec![1.0 / n as f64; n];
                    }
                    (pts, w)
                })
                .collect(),
        };
        let mut points: Vec<Vec<f64>> = vec![Vec::new()];
        let mut weights = vec![1.0];
        for (pts, ws) in &per_dim {
            let mut np = Vec::with_capacity(points.len() * pts.len());
            let mut nw = Vec::with_capacity(points.len() * pts.len());
            for (p, w) in points.iter().zip(&weights) {
                for (q, v) in pts.iter().zip(ws) {
                    let mut r = p.clone();
                    r.push(*q);
                    np.push(r);
                    nw.push(w * v);
                }
            }
            points = np;
            weights = nw;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        AtomList { points, weights }
    }

    /// Draws one disturbance. Truncated normals use inverse-CDF sampling on
    /// the truncated interval.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Self::Uniform { support } => support
                .lo()
                .iter()
                .zip(support.hi())
                .map(|(a, b)| if a == b { *a } else { a + (b - a) * rng.random::<f64>() })
                .collect(),
            Self::TruncatedNormal { mean, std, support } => (0..support.dim())
                .map(|i| {
                    let (a, b) = (support.lo()[i], support.hi()[i]);
                    let normal = Normal::new(mean[i], std[i]).expect("validated std");
                    let (pa, pb) = (normal.cdf(a), normal.cdf(b));
                    let u: f64 = rng.random();
                    let p = pa + u * (pb - pa);
                    if pb - pa <= 0.0 {
                        0.5 * (a + b)
                    } else {
                        normal.inverse_cdf(p).clamp(a, b)
                    }
                })
                .collect(),
            Self::Atoms { atoms, .. } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (p, w) in atoms.points.iter().zip(&atoms.weights) {
                    acc += w;
                    if u < acc {
                        return p.clone();
                    }
                }
                atoms.points.last().expect("nonempty").clone()
            }
        }
    }

    /// Mean and variance per coordinate of the exact law (not its atomization).
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let atoms = match self {
            Self::Uniform { support } => {
                let mean = support.midpoint();
                let var = support
                    .lo()
                    .iter()
                    .zip(support.hi())
                    .map(|(a, b)| (b - a) * (b - a) / 12.0)
                    .collect();
                return (mean, var);
            }
            Self::TruncatedNormal { .. } => self.singleton(4096),
            Self::Atoms { atoms, .. } => atoms.clone(),
        };
        let l = self.dim();
        let mean: Vec<f64> = (0..l).map(|i| atoms.expectation(|p| p[i])).collect();
        let var = (0..l)
            .map(|i| atoms.expectation(|p| (p[i] - mean[i]).powi(2)))
            .collect();
        (mean, var)
    }
}

fn cell_midpoints(lo: f64, hi: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = (hi - lo) / n as f64;
    let edges: Vec<f64> = (0..=n).map(|k| if k == n { hi } else { lo + h * k as f64 }).collect();
    let mids = edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect();
    (mids, edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_support_is_feasible() {
        let amb = MomentAmbiguitySet::scalar(-1.0, 1.0, 0.0, 0.0, 1.0, 1.0).unwrap();
        let f = amb.check_feasible().unwrap();
        assert!(f.feasible);
        let w = f.witness.unwrap();
        let total: f64 = w.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unreachable_mean_is_infeasible() {
        let amb = MomentAmbiguitySet::unchecked(
            BoxRegion::interval(0.0, 1.0).unwrap(),
            vec![5.0],
            vec![0.1],
            DMatrix::from_element(1, 1, 1.0),
            1.0,
        )
        .unwrap();
        let f = amb.check_feasible().unwrap();
        assert!(!f.feasible);
        assert_eq!(f.atoms_per_dim, 64);
        let err = MomentAmbiguitySet::scalar(0.0, 1.0, 5.0, 0.1, 1.0, 1.0).unwrap_err();
        assert_eq!(err, AmbiguityError::Infeasible { atoms_per_dim: 64 });
    }

    #[test]
    fn tcl_literal_support_is_feasible() {
        let k = 0.5 * (0.0625f64 / 12.0).sqrt();
        assert!((k - 0.03608).abs() < 1e-5);
        let amb = MomentAmbiguitySet::scalar(-k, k, 0.0, 0.1, 0.0625, 1.0).unwrap();
        assert!(amb.check_feasible().unwrap().feasible);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(MomentAmbiguitySet::scalar(-1.0, 1.0, 0.0, -0.1, 1.0, 1.0).is_err());
        assert!(MomentAmbiguitySet::scalar(-1.0, 1.0, 0.0, 0.1, 1.0, 0.5).is_err());
        assert!(MomentAmbiguitySet::scalar(-1.0, 1.0, 0.0, 0.1, -1.0, 1.0).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]);
        let sup = BoxRegion::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert!(MomentAmbiguitySet::unchecked(sup, vec![0.0; 2], vec![0.0; 2], asym, 1.0).is_err());
    }

    #[test]
    fn tiny_negative_eigenvalue_is_clamped() {
        let sup = BoxRegion::interval(-1.0, 1.0).unwrap();
        let amb =
            MomentAmbiguitySet::unchecked(sup, vec![0.0], vec![0.0], DMatrix::from_element(1, 1, -1e-12), 1.0).unwrap();
        assert_eq!(amb.second_moment()[(0, 0)], 0.0);
    }

    #[test]
    fn uniform_midpoint_atoms() {
        let nom = NominalDistribution::uniform(BoxRegion::interval(-1.0, 1.0).unwrap());
        let a = nom.singleton(4);
        let pts: Vec<f64> = a.points.iter().map(|p| p[0]).collect();
        assert_eq!(pts, vec![-0.75, -0.25, 0.25, 0.75]);
        assert_eq!(a.weights, vec![0.25; 4]);
    }

    #[test]
    fn atom_list_passthrough() {
        let nom = NominalDistribution::atoms(vec![vec![0.1], vec![0.7]], vec![0.4, 0.6]).unwrap();
        let a = nom.singleton(64);
        assert_eq!(a.points, vec![vec![0.1], vec![0.7]]);
        assert_eq!(a.weights, vec![0.4, 0.6]);
        assert!(NominalDistribution::atoms(vec![vec![0.0]], vec![0.9]).is_err());
    }

    #[test]
    fn truncated_normal_weights_from_cdf() {
        let nom = NominalDistribution::truncated_normal(vec![0.0], vec![0.25], BoxRegion::interval(-0.5, 0.5).unwrap())
            .unwrap();
        let a = nom.singleton(64);
        // Independent evaluation with the error function.
        let phi = |x: f64| 0.5 * (1.0 + statrs::function::erf::erf(x / (0.25 * 2f64.sqrt())));
        let z = phi(0.5) - phi(-0.5);
        for (k, w) in a.weights.iter().enumerate() {
            let lo = -0.5 + k as f64 / 64.0;
            let expected = (phi(lo + 1.0 / 64.0) - phi(lo)) / z;
            assert!((w - expected).abs() < 1e-12);
        }
        assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(
            NominalDistribution::truncated_normal(vec![0.0], vec![0.0], BoxRegion::interval(-1.0, 1.0).unwrap())
                .is_err()
        );
    }

    #[test]
    fn enlarging_preserves_feasibility() {
        let amb = MomentAmbiguitySet::scalar(-0.5, 1.0, 0.1, 0.0, 0.05, 1.0).unwrap();
        assert!(amb.with_mean_tol(vec![0.3]).is_ok());
        assert!(amb.with_scale(3.0).is_ok());
    }

    #[test]
    fn truncated_sampling_stays_in_support() {
        use rand::SeedableRng;
        let nom =
            NominalDistribution::truncated_normal(vec![0.0], vec![0.177], BoxRegion::interval(-0.2, 0.2).unwrap())
                .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let w = nom.sample(&mut rng);
            assert!((-0.2..=0.2).contains(&w[0]));
        }
    }
}
