//! Dual semi-infinite program for the inner worst-case expectation.
//!
//! For a fixed `(t, x, u)` and payoff `g(w) = v_{t+1}(f(x, u, w))` the dual is
//!
//! ```text
//! sup  -(b - m)'lam_lo - (b + m)'lam_hi - c Tr(Sigma Lam) - nu
//! s.t. w'(lam_hi - lam_lo) + (w - m)' Lam (w - m) + nu + g(w) >= 0   for all w in W
//!      lam_lo, lam_hi >= 0,  Lam >= 0 (diagonal)
//! ```
//!
//! It is solved by an exchange method: solve the LP over a finite set of
//! active points, find the most violated `w`, add it, drop points whose
//! constraint has become slack, repeat. With `Lam` restricted to a diagonal
//! matrix (for `l > 1`) the dual feasible set shrinks, so the value is a lower
//! bound on the worst-case expectation; it is exact for `l = 1`.

use thiserror::Error;

use crate::ambiguity::MomentAmbiguitySet;
use crate::bellman::ValueFunction;
use crate::lp::{LinearProgram, LpError, Relation, Sense};
use crate::model::Dynamics;
use crate::oracle::dyadic_grid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SipError {
    #[error("dual relaxation is unbounded even after reseeding with {points} points")]
    Unbounded { points: usize },
    #[error("dual subproblem LP failed: {0}")]
    Lp(LpError),
    #[error("payoff does not match the ambiguity set: {0}")]
    Payoff(String),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SipOptions {
    /// Stop once the most violated constraint has residual `>= -feas_tol`.
    pub feas_tol: f64,
    pub max_iter: usize,
    /// Active points whose constraint slack exceeds this are dropped.
    pub prune_slack: f64,
    /// Scan resolution per dimension for the generic constraint search.
    pub scan_points: usize,
}

impl Default for SipOptions {
    fn default() -> Self {
        Self {
            feas_tol: 1e-9,
            max_iter: 100,
            prune_slack: 1e-3,
            scan_points: 2049,
        }
    }
}

/// `payoff(w) = intercept + slope * w` on the closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub lo: f64,
    pub hi: f64,
    pub intercept: f64,
    pub slope: f64,
}

impl Segment {
    pub fn eval(&self, w: f64) -> f64 {
        self.intercept + self.slope * w
    }
}

/// Scalar payoff made of linear pieces that tile `[lo, hi]`. Consecutive
/// pieces share an endpoint but may disagree there (a jump); the payoff is
/// then taken as the smaller of the two values, i.e. its lower
/// semicontinuous envelope, which is what an infimum over measures sees.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinear {
    segments: Vec<Segment>,
}

impl PiecewiseLinear {
    pub fn new(segments: Vec<Segment>) -> Result<Self, SipError> {
        if segments.is_empty() {
            return Err(SipError::Payoff("no segments".into()));
        }
        for s in &segments {
            if s.lo.is_nan() || s.hi.is_nan() || s.lo > s.hi || !s.intercept.is_finite() || !s.slope.is_finite() {
                return Err(SipError::Payoff(format!("bad segment {s:?}")));
            }
        }
        for pair in segments.windows(2) {
            if pair[0].hi != pair[1].lo {
                return Err(SipError::Payoff(format!(
                    "segments do not tile: {} then {}",
                    pair[0].hi, pair[1].lo
                )));
            }
        }
        Ok(Self { segments })
    }

    /// Continuous interpolant through `(xs[k], ys[k])`, `xs` strictly increasing.
    pub fn from_breakpoints(xs: &[f64], ys: &[f64]) -> Result<Self, SipError> {
        if xs.len() < 2 || xs.len() != ys.len() {
            return Err(SipError::Payoff("need at least two breakpoints".into()));
        }
        let segments = xs
            .windows(2)
            .zip(ys.windows(2))
            .map(|(x, y)| {
                let slope = (y[1] - y[0]) / (x[1] - x[0]);
                Segment {
                    lo: x[0],
                    hi: x[1],
                    intercept: y[0] - slope * x[0],
                    slope,
                }
            })
            .collect();
        Self::new(segments)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn lo(&self) -> f64 {
        self.segments[0].lo
    }

    pub fn hi(&self) -> f64 {
        self.segments[self.segments.len() - 1].hi
    }

    /// Lower semicontinuous evaluation (minimum over pieces containing `w`).
    pub fn eval(&self, w: f64) -> f64 {
        let w = w.clamp(self.lo(), self.hi());
        let start = self.segments.partition_point(|s| s.hi < w);
        self.segments[start..]
            .iter()
            .take_while(|s| s.lo <= w)
            .map(|s| s.eval(w))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Boxed payoff `w -> g(w)`.
pub type PayoffFn<'a> = Box<dyn Fn(&[f64]) -> f64 + Send + Sync + 'a>;

/// The function `g` in the semi-infinite constraint.
pub enum Payoff<'a> {
    /// Scalar disturbance, piecewise linear payoff: exact constraint search.
    Piecewise(PiecewiseLinear),
    /// Anything else: scan plus local refinement.
    Function(PayoffFn<'a>),
}

impl Payoff<'_> {
    pub fn eval(&self, w: &[f64]) -> f64 {
        match self {
            Payoff::Piecewise(p) => p.eval(w[0]),
            Payoff::Function(f) => f(w),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    /// Multipliers of the lower mean bounds (`>= 0`).
    pub lower: Vec<f64>,
    /// Multipliers of the upper mean bounds (`>= 0`).
    pub upper: Vec<f64>,
    /// Diagonal of the second-moment multiplier (`>= 0`).
    pub second: Vec<f64>,
    pub nu: f64,
}

impl Multipliers {
    pub fn zeros(l: usize) -> Self {
        Self {
            lower: vec![0.0; l],
            upper: vec![0.0; l],
            second: vec![0.0; l],
            nu: 0.0,
        }
    }

    pub fn objective(&self, amb: &MomentAmbiguitySet) -> f64 {
        let bl = amb.lower_offset();
        let bu = amb.upper_offset();
        let l = amb.dim();
        -(0..l)
            .map(|i| bl[i] * self.lower[i] + bu[i] * self.upper[i] + amb.moment_budget(i) * self.second[i])
            .sum::<f64>()
            - self.nu
    }

    /// Left-hand side of the semi-infinite constraint at `w` with payoff value `g`.
    pub fn constraint(&self, amb: &MomentAmbiguitySet, w: &[f64], g: f64) -> f64 {
        let m = amb.mean();
        let mut s = self.nu + g;
        for i in 0..w.len() {
            s += w[i] * (self.upper[i] - self.lower[i]) + self.second[i] * (w[i] - m[i]).powi(2);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivePoint {
    pub w: Vec<f64>,
    pub payoff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViolatedPoint {
    pub w: Vec<f64>,
    pub payoff: f64,
    /// Constraint value at `w`; negative means violated.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct DualCertificate {
    pub multipliers: Multipliers,
    /// Dual objective of `multipliers` (after `nu` absorbed the final residual).
    pub raw_objective: f64,
    /// `raw_objective` clamped to `[0, 1]`.
    pub value: f64,
    pub active_points: Vec<ActivePoint>,
    pub iterations: usize,
    /// Most violated constraint value for the last relaxation solved.
    pub residual: f64,
    pub converged: bool,
    /// Relaxed LP objective per exchange iteration.
    pub objective_history: Vec<f64>,
}

/// Finite relaxation: maximize the dual objective subject to one constraint
/// per active point. Returns the multipliers and the relaxed objective.
pub fn solve_subproblem(points: &[ActivePoint], amb: &MomentAmbiguitySet) -> Result<(Multipliers, f64), SipError> {
    let l = amb.dim();
    let bl = amb.lower_offset();
    let bu = amb.upper_offset();
    let m = amb.mean();
    // Variables: lower (l), upper (l), second (l), nu (free). Minimize the
    // negated dual objective.
    let mut cost = Vec::with_capacity(3 * l + 1);
    cost.extend_from_slice(&bl);
    cost.extend_from_slice(&bu);
    cost.extend((0..l).map(|i| amb.moment_budget(i)));
    cost.push(1.0);
    let mut lp = LinearProgram::new(Sense::Minimize, cost);
    lp.set_free(3 * l);
    for p in points {
        let mut row = Vec::with_capacity(3 * l + 1);
        row.extend(p.w.iter().copied());
        row.extend(p.w.iter().map(|v| -v));
        row.extend((0..l).map(|i| -(p.w[i] - m[i]).powi(2)));
        row.push(-1.0);
        lp.add_constraint(row, Relation::Le, p.payoff);
    }
    let sol = lp.solve().map_err(|e| match e {
        LpError::Unbounded => SipError::Unbounded { points: points.len() },
        other => SipError::Lp(other),
    })?;
    let x = sol.x;
    let mult = Multipliers {
        lower: x[0..l].iter().map(|v| v.max(0.0)).collect(),
        upper: x[l..2 * l].iter().map(|v| v.max(0.0)).collect(),
        second: x[2 * l..3 * l].iter().map(|v| v.max(0.0)).collect(),
        nu: x[3 * l],
    };
    Ok((mult, -sol.objective))
}

/// Global minimizer of the constraint function over the support.
pub fn most_violated_point(
    mult: &Multipliers,
    payoff: &Payoff<'_>,
    amb: &MomentAmbiguitySet,
    opts: &SipOptions,
) -> ViolatedPoint {
    match payoff {
        Payoff::Piecewise(p) => violated_piecewise(mult, p, amb),
        Payoff::Function(f) => violated_scan(mult, f.as_ref(), amb, opts),
    }
}

fn violated_piecewise(mult: &Multipliers, pwl: &PiecewiseLinear, amb: &MomentAmbiguitySet) -> ViolatedPoint {
    let m = amb.mean()[0];
    let d = mult.upper[0] - mult.lower[0];
    let lam = mult.second[0];
    let mut best = ViolatedPoint {
        w: vec![pwl.lo()],
        payoff: f64::NAN,
        residual: f64::INFINITY,
    };
    for seg in pwl.segments() {
        let g = |w: f64| d * w + lam * (w - m) * (w - m) + mult.nu + seg.eval(w);
        let mut consider = |w: f64| {
            let r = g(w);
            if r < best.residual {
                best = ViolatedPoint {
                    w: vec![w],
                    payoff: seg.eval(w),
                    residual: r,
                };
            }
        };
        consider(seg.lo);
        if lam > 0.0 {
            let vertex = m - (d + seg.slope) / (2.0 * lam);
            if seg.lo < vertex && vertex < seg.hi {
                consider(vertex);
            }
        }
        consider(seg.hi);
    }
    best
}

fn violated_scan(
    mult: &Multipliers,
    f: &(dyn Fn(&[f64]) -> f64 + Send + Sync + '_),
    amb: &MomentAmbiguitySet,
    opts: &SipOptions,
) -> ViolatedPoint {
    let l = amb.dim();
    let per_dim = if l <= 2 {
        opts.scan_points.max(3)
    } else {
        let budget = (opts.scan_points.max(3) as f64).powi(2);
        (budget.powf(1.0 / l as f64).floor() as usize).max(3)
    };
    let sup = amb.support();
    let g = |w: &[f64]| {
        let p = f(w);
        (mult.constraint(amb, w, p), p)
    };
    let steps: Vec<f64> = (0..l)
        .map(|i| (sup.hi()[i] - sup.lo()[i]) / (per_dim - 1) as f64)
        .collect();
    let mut idx = vec![0usize; l];
    let mut w = sup.lo().to_vec();
    let mut best_w = w.clone();
    let (mut best_r, mut best_p) = g(&w);
    'scan: loop {
        let mut d = l;
        loop {
            if d == 0 {
                break 'scan;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < per_dim {
                break;
            }
            idx[d] = 0;
        }
        for i in 0..l {
            w[i] = if idx[i] == per_dim - 1 {
                sup.hi()[i]
            } else {
                sup.lo()[i] + steps[i] * idx[i] as f64
            };
        }
        let (r, p) = g(&w);
        if r < best_r {
            best_r = r;
            best_p = p;
            best_w.clone_from(&w);
        }
    }
    // Coordinate-wise golden-section refinement inside the neighbouring cells.
    let mut cur = best_w.clone();
    for _ in 0..3 {
        for i in 0..l {
            let a = (cur[i] - steps[i]).max(sup.lo()[i]);
            let b = (cur[i] + steps[i]).min(sup.hi()[i]);
            let mut probe = cur.clone();
            let t = golden_section(a, b, 1e-12 * (1.0 + steps[i]), |v| {
                probe[i] = v;
                g(&probe).0
            });
            let mut cand = cur.clone();
            cand[i] = t;
            let (r, p) = g(&cand);
            if r < best_r {
                best_r = r;
                best_p = p;
                best_w.clone_from(&cand);
                cur = cand;
            }
        }
    }
    ViolatedPoint {
        w: best_w,
        payoff: best_p,
        residual: best_r,
    }
}

fn golden_section<F: FnMut(f64) -> f64>(mut a: f64, mut b: f64, tol: f64, mut f: F) -> f64 {
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= tol {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

fn seed_points(payoff: &Payoff<'_>, amb: &MomentAmbiguitySet) -> Vec<ActivePoint> {
    let sup = amb.support();
    let mut pts = sup.corners();
    pts.push(sup.midpoint());
    pts.push(sup.clip(amb.mean()));
    let mut out: Vec<ActivePoint> = Vec::with_capacity(pts.len());
    for w in pts {
        if out.iter().all(|p| p.w != w) {
            let payoff = payoff.eval(&w);
            out.push(ActivePoint { w, payoff });
        }
    }
    out
}

/// Exchange method for the dual SIP with an arbitrary payoff.
pub fn solve_dual(
    payoff: &Payoff<'_>,
    amb: &MomentAmbiguitySet,
    opts: &SipOptions,
) -> Result<DualCertificate, SipError> {
    if let Payoff::Piecewise(p) = payoff {
        let sup = amb.support();
        if amb.dim() != 1 || p.lo() != sup.lo()[0] || p.hi() != sup.hi()[0] {
            return Err(SipError::Payoff(format!(
                "piecewise payoff spans [{}, {}] but the support is {:?}..{:?}",
                p.lo(),
                p.hi(),
                sup.lo(),
                sup.hi()
            )));
        }
    }
    let mut active = seed_points(payoff, amb);
    let mut reseeded = false;
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let (mut mult, mut last) = loop {
        match solve_subproblem(&active, amb) {
            Ok(r) => break r,
            Err(SipError::Unbounded { .. }) if !reseeded => {
                reseeded = true;
                for w in dyadic_grid(amb.support(), 16) {
                    if active.iter().all(|p| p.w != w) {
                        let g = payoff.eval(&w);
                        active.push(ActivePoint { w, payoff: g });
                    }
                }
            }
            Err(SipError::Unbounded { points }) => return Err(SipError::Unbounded { points }),
            Err(e) => return Err(e),
        }
    };
    let mut violated;
    loop {
        iterations += 1;
        history.push(last);
        violated = most_violated_point(&mult, payoff, amb, opts);
        if violated.residual >= -opts.feas_tol || iterations >= opts.max_iter {
            converged = violated.residual >= -opts.feas_tol;
            break;
        }
        if active.iter().any(|p| p.w == violated.w && p.payoff == violated.payoff) {
            // Already in the relaxation: the LP and the search disagree only
            // by rounding, nothing more can be gained.
            break;
        }
        active.retain(|p| mult.constraint(amb, &p.w, p.payoff) <= opts.prune_slack);
        active.push(ActivePoint {
            w: violated.w.clone(),
            payoff: violated.payoff,
        });
        (mult, last) = solve_subproblem(&active, amb)?;
    }
    let residual = violated.residual;
    if residual < 0.0 {
        mult.nu -= residual;
    }
    let raw_objective = mult.objective(amb);
    Ok(DualCertificate {
        multipliers: mult,
        raw_objective,
        value: raw_objective.clamp(0.0, 1.0),
        active_points: active,
        iterations,
        residual,
        converged,
        objective_history: history,
    })
}

/// Worst-case expectation of `v_next(f(x, u, w))` over the ambiguity set.
pub fn dual_inner_value(
    x: &[f64],
    u: &[f64],
    v_next: &ValueFunction,
    dynamics: &Dynamics,
    amb: &MomentAmbiguitySet,
    opts: &SipOptions,
) -> Result<(f64, DualCertificate), SipError> {
    let payoff = v_next.payoff(dynamics, x, u, amb.support());
    let cert = solve_dual(&payoff, amb, opts)?;
    Ok((cert.value, cert))
}
