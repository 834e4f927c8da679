//! Controlled stochastic system: dynamics `x' = f(x, u, w)`, the safe box and
//! the finite list of admissible controls. Also hosts the thermostatically
//! controlled load (TCL) benchmark.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("control set is empty")]
    EmptyControls,
    #[error("no admissible control at state {state:?}")]
    NoAdmissibleControl { state: Vec<f64> },
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// Axis-aligned closed box `[lo_1, hi_1] x ... x [lo_d, hi_d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegion {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

/// The safe set `A`. Boxes only.
pub type SafeRegion = BoxRegion;

impl BoxRegion {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, ModelError> {
        if lo.len() != hi.len() {
            return Err(ModelError::DimensionMismatch {
                what: "box upper bounds",
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo.is_empty() {
            return Err(ModelError::InvalidBox("zero-dimensional box".into()));
        }
        for (i, (a, b)) in lo.iter().zip(&hi).enumerate() {
            if !a.is_finite() || !b.is_finite() || a > b {
                return Err(ModelError::InvalidBox(format!(
                    "dimension {i}: [{a}, {b}] is not a finite closed interval"
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self, ModelError> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    /// Exact closed-interval membership; boundary points are inside.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (a, b))| *a <= *v && *v <= *b)
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn clip(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (a, b))| v.clamp(*a, *b))
            .collect()
    }

    /// All `2^d` corners, lowest coordinates first.
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..1usize << d)
            .map(|mask| {
                (0..d)
                    .map(|i| if mask >> i & 1 == 1 { self.hi[i] } else { self.lo[i] })
                    .collect()
            })
            .collect()
    }

    /// Tensor product of `{lo, mid, hi}` per dimension (`3^d` points).
    pub fn probe_points(&self) -> Vec<Vec<f64>> {
        let mut pts: Vec<Vec<f64>> = vec![Vec::new()];
        for i in 0..self.dim() {
            let vals = [self.lo[i], 0.5 * (self.lo[i] + self.hi[i]), self.hi[i]];
            pts = pts
                .into_iter()
                .flat_map(|p| {
                    vals.iter().map(move |&v| {
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
}

/// Coefficients asserting `f(x, u, w) = A_x x + B_u u + c + G_w w`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineDescriptor {
    pub a_x: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub c: DVector<f64>,
    pub g_w: DMatrix<f64>,
}

impl AffineDescriptor {
    pub fn new(a_x: DMatrix<f64>, b_u: DMatrix<f64>, c: DVector<f64>, g_w: DMatrix<f64>) -> Result<Self, ModelError> {
        let n = a_x.nrows();
        if n == 0 || a_x.ncols() != n {
            return Err(ModelError::Invalid(format!(
                "A_x must be square and nonempty, got {}x{}",
                a_x.nrows(),
                a_x.ncols()
            )));
        }
        for (what, rows) in [
            ("B_u rows", b_u.nrows()),
            ("c length", c.len()),
            ("G_w rows", g_w.nrows()),
        ] {
            if rows != n {
                return Err(ModelError::DimensionMismatch {
                    what,
                    expected: n,
                    got: rows,
                });
            }
        }
        if g_w.ncols() == 0 {
            return Err(ModelError::Invalid("G_w has no columns".into()));
        }
        let finite = a_x.iter().chain(b_u.iter()).chain(c.iter()).chain(g_w.iter());
        if finite.clone().any(|v| !v.is_finite()) {
            return Err(ModelError::Invalid("affine descriptor has non-finite entries".into()));
        }
        Ok(Self { a_x, b_u, c, g_w })
    }

    /// Same as [`AffineDescriptor::new`] from row-major nested lists.
    pub fn from_rows(a_x: &[Vec<f64>], b_u: &[Vec<f64>], c: Vec<f64>, g_w: &[Vec<f64>]) -> Result<Self, ModelError> {
        fn mat(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ModelError> {
            let cols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != cols) {
                return Err(ModelError::Invalid(format!("{name} has rows of different lengths")));
            }
            Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
        }
        Self::new(
            mat("A_x", a_x)?,
            mat("B_u", b_u)?,
            DVector::from_vec(c),
            mat("G_w", g_w)?,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a_x.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b_u.ncols()
    }

    pub fn disturbance_dim(&self) -> usize {
        self.g_w.ncols()
    }

    /// `A_x x + B_u u + c`, the part of the next state that does not depend on `w`.
    pub fn offset(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let n = self.state_dim();
        (0..n)
            .map(|i| {
                let ax: f64 = (0..n).map(|j| self.a_x[(i, j)] * x[j]).sum();
                let bu: f64 = (0..u.len()).map(|j| self.b_u[(i, j)] * u[j]).sum();
                ax + bu + self.c[i]
            })
            .collect()
    }

    pub fn apply(&self, x: &[f64], u: &[f64], w: &[f64]) -> Vec<f64> {
        let mut y = self.offset(x, u);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += (0..w.len()).map(|j| self.g_w[(i, j)] * w[j]).sum::<f64>();
        }
        y
    }
}

pub type TransitionFn = dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync;

/// State transition `x_{t+1} = f(x_t, u_t, w_t)`.
#[derive(Clone)]
pub struct Dynamics {
    state_dim: usize,
    control_dim: usize,
    disturbance_dim: usize,
    transition: Arc<TransitionFn>,
    affine: Option<AffineDescriptor>,
}

impl fmt::Debug for Dynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dynamics")
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("disturbance_dim", &self.disturbance_dim)
            .field("affine", &self.affine)
            .finish()
    }
}

impl Dynamics {
    pub fn affine(desc: AffineDescriptor) -> Self {
        let d = desc.clone();
        Self {
            state_dim: desc.state_dim(),
            control_dim: desc.control_dim(),
            disturbance_dim: desc.disturbance_dim(),
            transition: Arc::new(move |x, u, w| d.apply(x, u, w)),
            affine: Some(desc),
        }
    }

    /// General (possibly nonlinear) dynamics. The closure must be pure.
    pub fn from_fn<F>(state_dim: usize, control_dim: usize, disturbance_dim: usize, f: F) -> Self
    where
        F: Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            state_dim,
            control_dim,
            disturbance_dim,
            transition: Arc::new(f),
            affine: None,
        }
    }

    /// Attach an affine descriptor to closure-based dynamics. The two are
    /// compared at a fixed set of probe points and must agree within 1e-12
    /// (relative to the magnitude of the result).
    pub fn with_affine_descriptor(mut self, desc: AffineDescriptor) -> Result<Self, ModelError> {
        if desc.state_dim() != self.state_dim
            || desc.control_dim() != self.control_dim
            || desc.disturbance_dim() != self.disturbance_dim
        {
            return Err(ModelError::Invalid(
                "affine descriptor dimensions do not match the dynamics".into(),
            ));
        }
        let probes = [-3.7, -1.0, 0.0, 0.25, 2.0, 11.5];
        for (k, &a) in probes.iter().enumerate() {
            let b = probes[(k + 2) % probes.len()];
            let c = probes[(k + 4) % probes.len()];
            let x: Vec<f64> = (0..self.state_dim).map(|i| a + i as f64).collect();
            let u: Vec<f64> = (0..self.control_dim).map(|i| b - 0.5 * i as f64).collect();
            let w: Vec<f64> = (0..self.disturbance_dim).map(|i| 0.1 * c + i as f64).collect();
            let direct = (self.transition)(&x, &u, &w);
            let formula = desc.apply(&x, &u, &w);
            let agree = direct.len() == formula.len()
                && direct
                    .iter()
                    .zip(&formula)
                    .all(|(p, q)| (p - q).abs() <= 1e-12 * (1.0 + q.abs()));
            if !agree {
                return Err(ModelError::Invalid(format!(
                    "transition disagrees with affine descriptor at x={x:?}, u={u:?}, w={w:?}"
                )));
            }
        }
        self.affine = Some(desc);
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn disturbance_dim(&self) -> usize {
        self.disturbance_dim
    }

    pub fn affine_descriptor(&self) -> Option<&AffineDescriptor> {
        self.affine.as_ref()
    }

    pub fn step(&self, x: &[f64], u: &[f64], w: &[f64]) -> Result<Vec<f64>, ModelError> {
        for (what, expected, got) in [
            ("state", self.state_dim, x.len()),
            ("control", self.control_dim, u.len()),
            ("disturbance", self.disturbance_dim, w.len()),
        ] {
            if expected != got {
                return Err(ModelError::DimensionMismatch { what, expected, got });
            }
        }
        Ok(self.step_unchecked(x, u, w))
    }

    pub(crate) fn step_unchecked(&self, x: &[f64], u: &[f64], w: &[f64]) -> Vec<f64> {
        (self.transition)(x, u, w)
    }
}

pub type AdmissibilityFn = dyn Fn(&[f64], usize) -> bool + Send + Sync;

/// Finite list of control vectors with an optional state-dependent filter `U(x)`.
#[derive(Clone)]
pub struct ControlSet {
    controls: Vec<Vec<f64>>,
    admissible: Option<Arc<AdmissibilityFn>>,
}

impl fmt::Debug for ControlSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlSet")
            .field("controls", &self.controls)
            .field("restricted", &self.admissible.is_some())
            .finish()
    }
}

impl ControlSet {
    pub fn new(controls: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let Some(first) = controls.first() else {
            return Err(ModelError::EmptyControls);
        };
        let m = first.len();
        if let Some(bad) = controls.iter().find(|c| c.len() != m) {
            return Err(ModelError::DimensionMismatch {
                what: "control vector",
                expected: m,
                got: bad.len(),
            });
        }
        Ok(Self {
            controls,
            admissible: None,
        })
    }

    /// Scalar controls `lo, lo + h, ..., hi` with `levels` entries.
    pub fn uniform_interval(lo: f64, hi: f64, levels: usize) -> Result<Self, ModelError> {
        if levels < 2 || lo >= hi {
            return Err(ModelError::Invalid(format!(
                "control interval [{lo}, {hi}] with {levels} levels"
            )));
        }
        let h = (hi - lo) / (levels - 1) as f64;
        Self::new((0..levels).map(|i| vec![lo + h * i as f64]).collect())
    }

    pub fn with_admissibility<F>(mut self, f: F) -> Self
    where
        F: Fn(&[f64], usize) -> bool + Send + Sync + 'static,
    {
        self.admissible = Some(Arc::new(f));
        self
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.controls[0].len()
    }

    pub fn get(&self, index: usize) -> &[f64] {
        &self.controls[index]
    }

    pub fn controls(&self) -> &[Vec<f64>] {
        &self.controls
    }

    pub fn is_admissible(&self, x: &[f64], index: usize) -> bool {
        index < self.controls.len() && self.admissible.as_ref().is_none_or(|f| f(x, index))
    }

    /// Admissible indices at `x`, ascending.
    pub fn admissible_indices(&self, x: &[f64]) -> Vec<usize> {
        (0..self.controls.len()).filter(|&i| self.is_admissible(x, i)).collect()
    }

    pub fn check_nonempty_at<'a, I>(&self, states: I) -> Result<(), ModelError>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        for x in states {
            if self.admissible_indices(x).is_empty() {
                return Err(ModelError::NoAdmissibleControl { state: x.to_vec() });
            }
        }
        Ok(())
    }
}

/// Everything needed to pose the safety problem except the disturbance model.
#[derive(Debug, Clone)]
pub struct Model {
    pub dynamics: Dynamics,
    pub safe_region: SafeRegion,
    pub controls: ControlSet,
    pub horizon: usize,
}

impl Model {
    pub fn new(
        dynamics: Dynamics,
        safe_region: SafeRegion,
        controls: ControlSet,
        horizon: usize,
    ) -> Result<Self, ModelError> {
        if safe_region.dim() != dynamics.state_dim() {
            return Err(ModelError::DimensionMismatch {
                what: "safe region",
                expected: dynamics.state_dim(),
                got: safe_region.dim(),
            });
        }
        if controls.dim() != dynamics.control_dim() {
            return Err(ModelError::DimensionMismatch {
                what: "control vector",
                expected: dynamics.control_dim(),
                got: controls.dim(),
            });
        }
        Ok(Self {
            dynamics,
            safe_region,
            controls,
            horizon,
        })
    }

    pub fn step(&self, x: &[f64], u: &[f64], w: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.dynamics.step(x, u, w)
    }
}

/// Physical parameters of the scalar TCL model
/// `x' = a x + (1 - a)(theta - eta R P u) + w`, `a = exp(-h / (C R))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TclParams {
    /// Thermal resistance, degC/kW.
    pub resistance: f64,
    /// Thermal capacitance, kWh/degC.
    pub capacitance: f64,
    /// Ambient temperature, degC.
    pub ambient: f64,
    /// Step length, hours.
    pub step_hours: f64,
    /// Energy transfer rate, kW.
    pub power: f64,
    pub efficiency: f64,
}

impl Default for TclParams {
    fn default() -> Self {
        Self {
            resistance: 2.0,
            capacitance: 2.0,
            ambient: 32.0,
            step_hours: 5.0 / 60.0,
            power: 14.0,
            efficiency: 0.7,
        }
    }
}

impl TclParams {
    pub fn decay(&self) -> f64 {
        (-self.step_hours / (self.capacitance * self.resistance)).exp()
    }

    /// Fixed point of the noiseless map under control `u`.
    pub fn equilibrium(&self, u: f64) -> f64 {
        self.ambient - self.efficiency * self.resistance * self.power * u
    }

    pub fn dynamics(&self) -> Dynamics {
        let a = self.decay();
        let desc = AffineDescriptor {
            a_x: DMatrix::from_element(1, 1, a),
            b_u: DMatrix::from_element(1, 1, -(1.0 - a) * self.efficiency * self.resistance * self.power),
            c: DVector::from_element(1, (1.0 - a) * self.ambient),
            g_w: DMatrix::from_element(1, 1, 1.0),
        };
        Dynamics::affine(desc)
    }
}

pub const TCL_HORIZON: usize = 18;

/// TCL benchmark: ON/OFF control, `A = [19, 22]`, 18 five-minute stages.
pub fn tcl_preset() -> Model {
    tcl_model(TclParams::default())
}

pub fn tcl_model(params: TclParams) -> Model {
    Model {
        dynamics: params.dynamics(),
        safe_region: BoxRegion::interval(19.0, 22.0).expect("static interval"),
        controls: ControlSet::new(vec![vec![0.0], vec![1.0]]).expect("static controls"),
        horizon: TCL_HORIZON,
    }
}
