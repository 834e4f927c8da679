//! Run configuration: a sectioned key-value file (TOML syntax) resolved into
//! a fully defaulted [`RunConfig`], validated eagerly.
//!
//! The canonical form of a resolved config is its TOML serialization; hashes
//! used for caching are SHA-256 digests of that text.

use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ambiguity::{MomentAmbiguitySet, NominalDistribution};
use crate::bellman::{BackupOptions, Mode, Schedule, StateGrid};
use crate::dual_sip::SipOptions;
use crate::model::{self, AffineDescriptor, BoxRegion, ControlSet, Dynamics, Model, TclParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("{}field `{field}`: {msg}", line.map(|l| format!("line {l}, ")).unwrap_or_default())]
    Field {
        line: Option<usize>,
        field: String,
        msg: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

// Raw, as-written sections. Every field is optional so presets can fill gaps.

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    grid: RawGrid,
    #[serde(default)]
    ambiguity: RawAmbiguity,
    #[serde(default)]
    nominal: RawDist,
    #[serde(default)]
    run: RawRun,
    #[serde(default)]
    sweep: RawSweep,
    #[serde(default)]
    simulation: RawSimulation,
    #[serde(default)]
    audit: RawAudit,
    #[serde(default)]
    solver: RawSolver,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    preset: Option<String>,
    a: Option<Vec<Vec<f64>>>,
    b: Option<Vec<Vec<f64>>>,
    c: Option<Vec<f64>>,
    g: Option<Vec<Vec<f64>>>,
    safe_lo: Option<Vec<f64>>,
    safe_hi: Option<Vec<f64>>,
    controls: Option<Vec<Vec<f64>>>,
    control_lo: Option<f64>,
    control_hi: Option<f64>,
    control_levels: Option<usize>,
    horizon: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    lo: Option<Vec<f64>>,
    hi: Option<Vec<f64>>,
    nodes: Option<Vec<usize>>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAmbiguity {
    support_lo: Option<Vec<f64>>,
    support_hi: Option<Vec<f64>>,
    mean: Option<Vec<f64>>,
    mean_tol: Option<Vec<f64>>,
    second_moment: Option<Vec<Vec<f64>>>,
    scale: Option<f64>,
    #[serde(default)]
    stage: Vec<RawAmbiguity>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDist {
    kind: Option<String>,
    mean: Option<Vec<f64>>,
    std: Option<Vec<f64>>,
    support_lo: Option<Vec<f64>>,
    support_hi: Option<Vec<f64>>,
    atoms_per_dim: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    mode: Option<String>,
    alpha: Option<f64>,
    fallback: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    b: Option<Vec<f64>>,
    c: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimulation {
    truth: Option<String>,
    truth_mean: Option<Vec<f64>>,
    truth_std: Option<Vec<f64>>,
    x0: Option<Vec<f64>>,
    samples: Option<usize>,
    seed: Option<u64>,
    export_trajectories: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAudit {
    samples: Option<usize>,
    seed: Option<u64>,
    atoms: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    feas_tol: Option<f64>,
    max_iter: Option<usize>,
    prune_slack: Option<f64>,
    scan_points: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<String>,
}

// Resolved config.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Tcl,
    Affine {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<f64>,
        g: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub safe_lo: Vec<f64>,
    pub safe_hi: Vec<f64>,
    pub controls: Vec<Vec<f64>>,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguitySpec {
    pub support_lo: Vec<f64>,
    pub support_hi: Vec<f64>,
    pub mean: Vec<f64>,
    pub mean_tol: Vec<f64>,
    pub second_moment: Vec<Vec<f64>>,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistKind {
    Uniform,
    TruncatedNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistSpec {
    pub kind: DistKind,
    pub mean: Vec<f64>,
    /// Standard deviation of the parent normal (ignored for uniform).
    pub std: Vec<f64>,
    pub support_lo: Vec<f64>,
    pub support_hi: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Robust,
    Nominal,
    Compare,
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "robust" => Ok(Self::Robust),
            "nominal" => Ok(Self::Nominal),
            "compare" => Ok(Self::Compare),
            other => Err(format!("unknown mode `{other}` (expected robust, nominal or compare)")),
        }
    }
}

/// Which recursion a cached solve belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveKind {
    Robust,
    Nominal,
}

impl SolveKind {
    pub fn label(&self) -> &'static str {
        match self {
            SolveKind::Robust => "robust",
            SolveKind::Nominal => "nominal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub truth: DistSpec,
    pub x0: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub export_trajectories: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSpec {
    pub samples: usize,
    pub seed: u64,
    pub atoms: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: RunMode,
    pub alpha: f64,
    pub fallback: usize,
    pub output_dir: String,
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub ambiguity: AmbiguitySpec,
    /// Per-stage overrides; empty means the shared set is used at every stage.
    pub ambiguity_stages: Vec<AmbiguitySpec>,
    pub nominal: DistSpec,
    pub nominal_atoms: usize,
    pub sweep_b: Vec<f64>,
    pub sweep_c: Vec<f64>,
    pub simulation: SimulationSpec,
    pub audit: AuditSpec,
    pub solver: SipOptions,
}

/// Half-width of the literal TCL disturbance support, `0.5 * sqrt(sigma2 / 12)`.
pub fn tcl_literal_half_width(sigma2: f64) -> f64 {
    0.5 * (sigma2 / 12.0).sqrt()
}

/// Half-width of the centred uniform law with variance `sigma2`.
pub fn variance_matched_half_width(sigma2: f64) -> f64 {
    (3.0 * sigma2).sqrt()
}

pub const TCL_SIGMA2: f64 = 0.0625;

struct Ctx<'a> {
    src: &'a str,
}

impl Ctx<'_> {
    fn err(&self, field: &str, msg: impl Into<String>) -> ConfigError {
        ConfigError::Field {
            line: locate(self.src, field),
            field: field.to_string(),
            msg: msg.into(),
        }
    }

    fn len(&self, field: &str, v: &[f64], n: usize) -> Result<(), ConfigError> {
        if v.len() != n {
            return Err(self.err(field, format!("expected {n} entries, got {}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(self.err(field, "entries must be finite"));
        }
        Ok(())
    }

    fn matrix(&self, field: &str, m: &[Vec<f64>], rows: usize, cols: usize) -> Result<DMatrix<f64>, ConfigError> {
        if m.len() != rows || m.iter().any(|r| r.len() != cols) {
            return Err(self.err(field, format!("expected a {rows}x{cols} matrix")));
        }
        if m.iter().flatten().any(|x| !x.is_finite()) {
            return Err(self.err(field, "entries must be finite"));
        }
        Ok(DMatrix::from_fn(rows, cols, |i, j| m[i][j]))
    }

    fn required<T>(&self, field: &str, v: Option<T>) -> Result<T, ConfigError> {
        v.ok_or_else(|| self.err(field, "missing"))
    }
}

/// 1-based line of `section.key` (or of the section header when the key is
/// absent). Array-of-table paths such as `ambiguity.stage` match the first
/// occurrence.
fn locate(src: &str, field: &str) -> Option<usize> {
    let (section, key) = field.rsplit_once('.').unwrap_or(("", field));
    let mut current = String::new();
    let mut header = None;
    for (i, line) in src.lines().enumerate() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[') {
            current = h.trim_start_matches('[').trim_end_matches(']').trim().to_string();
            if current == section && header.is_none() {
                header = Some(i + 1);
            }
            if current == field {
                return Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some(rest) = t.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    header
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&src)
    }

    pub fn parse(src: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(src).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let cfg = resolve(raw, &Ctx { src })?;
        cfg.validate(&Ctx { src })?;
        Ok(cfg)
    }

    /// Canonical text: the resolved config serialized with a fixed field order.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        digest(&self.canonical())
    }

    /// Cache key of one recursion: covers exactly the inputs of that solve.
    pub fn solve_key(&self, kind: SolveKind) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            kind: &'a str,
            model: &'a ModelSpec,
            grid: &'a GridSpec,
            ambiguity: Option<(&'a AmbiguitySpec, &'a [AmbiguitySpec])>,
            nominal: Option<(&'a DistSpec, usize)>,
            solver: &'a SipOptions,
        }
        let key = Key {
            kind: kind.label(),
            model: &self.model,
            grid: &self.grid,
            ambiguity: (kind == SolveKind::Robust).then_some((&self.ambiguity, &self.ambiguity_stages[..])),
            nominal: (kind == SolveKind::Nominal).then_some((&self.nominal, self.nominal_atoms)),
            solver: &self.solver,
        };
        digest(&toml::to_string(&key).expect("key serializes"))
    }

    pub fn build_model(&self) -> Model {
        let spec = &self.model;
        let dynamics = match &spec.kind {
            ModelKind::Tcl => TclParams::default().dynamics(),
            ModelKind::Affine { a, b, c, g } => {
                let n = a.len();
                let desc = AffineDescriptor::new(
                    DMatrix::from_fn(n, n, |i, j| a[i][j]),
                    DMatrix::from_fn(n, b[0].len(), |i, j| b[i][j]),
                    DVector::from_vec(c.clone()),
                    DMatrix::from_fn(n, g[0].len(), |i, j| g[i][j]),
                )
                .expect("validated descriptor");
                Dynamics::affine(desc)
            }
        };
        Model::new(
            dynamics,
            BoxRegion::new(spec.safe_lo.clone(), spec.safe_hi.clone()).expect("validated box"),
            ControlSet::new(spec.controls.clone()).expect("validated controls"),
            spec.horizon,
        )
        .expect("validated model")
    }

    pub fn build_grid(&self, model: &Model) -> Arc<StateGrid> {
        let bounds = BoxRegion::new(self.grid.lo.clone(), self.grid.hi.clone()).expect("validated grid box");
        Arc::new(StateGrid::new(&bounds, &self.grid.nodes, &model.safe_region).expect("validated grid"))
    }

    fn stage_specs(&self) -> Vec<AmbiguitySpec> {
        if self.ambiguity_stages.is_empty() {
            vec![self.ambiguity.clone()]
        } else {
            self.ambiguity_stages.clone()
        }
    }

    /// Robust-mode schedule, optionally overriding `b` (all coordinates) and `c`.
    pub fn ambiguity_schedule(&self, b: Option<f64>, c: Option<f64>) -> Result<Schedule<MomentAmbiguitySet>, String> {
        let sets = self
            .stage_specs()
            .into_iter()
            .map(|mut s| {
                if let Some(b) = b {
                    s.mean_tol = vec![b; s.mean.len()];
                }
                if let Some(c) = c {
                    s.scale = c;
                }
                build_ambiguity(&s)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(if self.ambiguity_stages.is_empty() {
            Schedule::Shared(sets.into_iter().next().expect("one set"))
        } else {
            Schedule::PerStage(sets)
        })
    }

    pub fn robust_mode(&self) -> Result<Mode, String> {
        Ok(Mode::Robust(self.ambiguity_schedule(None, None)?))
    }

    pub fn nominal_mode(&self) -> Mode {
        Mode::nominal(build_dist(&self.nominal), self.nominal_atoms)
    }

    pub fn mode_for(&self, kind: SolveKind) -> Result<Mode, String> {
        match kind {
            SolveKind::Robust => self.robust_mode(),
            SolveKind::Nominal => Ok(self.nominal_mode()),
        }
    }

    /// Recursions requested by the run mode.
    pub fn solve_kinds(&self) -> Vec<SolveKind> {
        match self.mode {
            RunMode::Robust => vec![SolveKind::Robust],
            RunMode::Nominal => vec![SolveKind::Nominal],
            RunMode::Compare => vec![SolveKind::Robust, SolveKind::Nominal],
        }
    }

    /// Disturbance support per stage (`W_t`), as used by the controller.
    pub fn supports(&self, kind: SolveKind) -> Vec<BoxRegion> {
        let h = self.model.horizon;
        match kind {
            SolveKind::Nominal => {
                let s = BoxRegion::new(self.nominal.support_lo.clone(), self.nominal.support_hi.clone())
                    .expect("validated support");
                vec![s; h]
            }
            SolveKind::Robust => {
                let specs = self.stage_specs();
                (0..h)
                    .map(|t| {
                        let s = if specs.len() == 1 { &specs[0] } else { &specs[t] };
                        BoxRegion::new(s.support_lo.clone(), s.support_hi.clone()).expect("validated support")
                    })
                    .collect()
            }
        }
    }

    pub fn truth(&self) -> NominalDistribution {
        build_dist(&self.simulation.truth)
    }

    pub fn backup_options(&self) -> BackupOptions {
        BackupOptions {
            sip: self.solver,
            pinned_control: None,
        }
    }

    fn validate(&self, ctx: &Ctx) -> Result<(), ConfigError> {
        let model = self.build_model();
        let bounds = BoxRegion::new(self.grid.lo.clone(), self.grid.hi.clone())
            .map_err(|e| ctx.err("grid.lo", e.to_string()))?;
        StateGrid::new(&bounds, &self.grid.nodes, &model.safe_region)
            .map_err(|e| ctx.err("grid.nodes", e.to_string()))?;
        let l = model.dynamics.disturbance_dim();
        for (i, s) in self.stage_specs().iter().enumerate() {
            let field = if self.ambiguity_stages.is_empty() {
                "ambiguity.mean".to_string()
            } else {
                format!("ambiguity.stage[{i}]")
            };
            if s.mean.len() != l {
                return Err(ctx.err(&field, format!("disturbance dimension is {l}")));
            }
            build_ambiguity(s).map_err(|e| ctx.err(&field, e))?;
        }
        if !self.ambiguity_stages.is_empty() && self.ambiguity_stages.len() != self.model.horizon {
            return Err(ctx.err(
                "ambiguity.stage",
                format!(
                    "{} stage entries for horizon {}",
                    self.ambiguity_stages.len(),
                    self.model.horizon
                ),
            ));
        }
        for (field, d) in [
            ("nominal.kind", &self.nominal),
            ("simulation.truth", &self.simulation.truth),
        ] {
            if d.mean.len() != l {
                return Err(ctx.err(field, format!("disturbance dimension is {l}")));
            }
            validate_dist(d).map_err(|e| ctx.err(field, e))?;
        }
        if self.nominal_atoms < 2 {
            return Err(ctx.err("nominal.atoms_per_dim", "must be at least 2"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(ctx.err("run.alpha", format!("must lie in (0, 1], got {}", self.alpha)));
        }
        if self.fallback >= model.controls.len() {
            return Err(ctx.err(
                "run.fallback",
                format!("control index out of range (0..{})", model.controls.len()),
            ));
        }
        if self.sweep_b.is_empty() || self.sweep_b.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(ctx.err("sweep.b", "must be a nonempty list of values >= 0"));
        }
        if self.sweep_c.is_empty() || self.sweep_c.iter().any(|c| !(c.is_finite() && *c >= 1.0)) {
            return Err(ctx.err("sweep.c", "must be a nonempty list of values >= 1"));
        }
        if self.simulation.x0.len() != model.dynamics.state_dim() {
            return Err(ctx.err(
                "simulation.x0",
                format!("state dimension is {}", model.dynamics.state_dim()),
            ));
        }
        if self.simulation.samples == 0 {
            return Err(ctx.err("simulation.samples", "must be positive"));
        }
        if self.audit.atoms.is_empty() || self.audit.atoms.contains(&0) {
            return Err(ctx.err("audit.atoms", "must be a nonempty list of positive atom counts"));
        }
        let s = &self.solver;
        if s.feas_tol.is_nan()
            || s.feas_tol <= 0.0
            || s.prune_slack.is_nan()
            || s.prune_slack <= 0.0
            || s.max_iter == 0
            || s.scan_points < 3
        {
            return Err(ctx.err("solver", "tolerances must be positive, max_iter >= 1, scan_points >= 3"));
        }
        Ok(())
    }
}

fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn build_ambiguity(s: &AmbiguitySpec) -> Result<MomentAmbiguitySet, String> {
    let l = s.mean.len();
    let support = BoxRegion::new(s.support_lo.clone(), s.support_hi.clone()).map_err(|e| e.to_string())?;
    if s.second_moment.len() != l || s.second_moment.iter().any(|r| r.len() != l) {
        return Err(format!("second_moment must be {l}x{l}"));
    }
    let sigma = DMatrix::from_fn(l, l, |i, j| s.second_moment[i][j]);
    MomentAmbiguitySet::new(support, s.mean.clone(), s.mean_tol.clone(), sigma, s.scale).map_err(|e| e.to_string())
}

fn validate_dist(d: &DistSpec) -> Result<(), String> {
    let support = BoxRegion::new(d.support_lo.clone(), d.support_hi.clone()).map_err(|e| e.to_string())?;
    if d.kind == DistKind::TruncatedNormal {
        NominalDistribution::truncated_normal(d.mean.clone(), d.std.clone(), support).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn build_dist(d: &DistSpec) -> NominalDistribution {
    let support = BoxRegion::new(d.support_lo.clone(), d.support_hi.clone()).expect("validated support");
    match d.kind {
        DistKind::Uniform => NominalDistribution::uniform(support),
        DistKind::TruncatedNormal => {
            NominalDistribution::truncated_normal(d.mean.clone(), d.std.clone(), support).expect("validated law")
        }
    }
}

fn resolve(raw: RawConfig, ctx: &Ctx) -> Result<RunConfig, ConfigError> {
    let rm = raw.model;
    let preset = rm
        .preset
        .as_deref()
        .unwrap_or(if rm.a.is_some() { "affine" } else { "tcl" });
    let (kind, n, l, def_safe, def_controls, def_horizon) = match preset {
        "tcl" => {
            for (name, set) in [
                ("a", rm.a.is_some()),
                ("b", rm.b.is_some()),
                ("c", rm.c.is_some()),
                ("g", rm.g.is_some()),
            ] {
                if set {
                    return Err(ctx.err(&format!("model.{name}"), "not allowed with preset = \"tcl\""));
                }
            }
            (
                ModelKind::Tcl,
                1,
                1,
                Some((vec![19.0], vec![22.0])),
                Some(vec![vec![0.0], vec![1.0]]),
                Some(model::TCL_HORIZON),
            )
        }
        "affine" => {
            let a = ctx.required("model.a", rm.a)?;
            let n = a.len();
            let b = ctx.required("model.b", rm.b)?;
            let c = ctx.required("model.c", rm.c)?;
            let g = ctx.required("model.g", rm.g)?;
            if n == 0 {
                return Err(ctx.err("model.a", "state dimension must be positive"));
            }
            ctx.matrix("model.a", &a, n, n)?;
            let m = b.first().map_or(0, Vec::len);
            let l = g.first().map_or(0, Vec::len);
            if m == 0 {
                return Err(ctx.err("model.b", "control dimension must be positive"));
            }
            if l == 0 {
                return Err(ctx.err("model.g", "disturbance dimension must be positive"));
            }
            ctx.matrix("model.b", &b, n, m)?;
            ctx.len("model.c", &c, n)?;
            ctx.matrix("model.g", &g, n, l)?;
            (ModelKind::Affine { a, b, c, g }, n, l, None, None, None)
        }
        other => {
            return Err(ctx.err(
                "model.preset",
                format!("unknown preset `{other}` (expected tcl or affine)"),
            ))
        }
    };
    let safe_lo = rm.safe_lo.or(def_safe.as_ref().map(|s| s.0.clone()));
    let safe_hi = rm.safe_hi.or(def_safe.map(|s| s.1));
    let safe_lo = ctx.required("model.safe_lo", safe_lo)?;
    let safe_hi = ctx.required("model.safe_hi", safe_hi)?;
    ctx.len("model.safe_lo", &safe_lo, n)?;
    ctx.len("model.safe_hi", &safe_hi, n)?;
    BoxRegion::new(safe_lo.clone(), safe_hi.clone()).map_err(|e| ctx.err("model.safe_lo", e.to_string()))?;

    let controls = match (rm.controls, rm.control_levels) {
        (Some(_), Some(_)) => return Err(ctx.err("model.control_levels", "give either controls or a control grid")),
        (Some(c), None) => c,
        (None, Some(levels)) => {
            let lo = ctx.required("model.control_lo", rm.control_lo)?;
            let hi = ctx.required("model.control_hi", rm.control_hi)?;
            ControlSet::uniform_interval(lo, hi, levels)
                .map_err(|e| ctx.err("model.control_levels", e.to_string()))?
                .controls()
                .to_vec()
        }
        (None, None) => ctx.required("model.controls", def_controls)?,
    };
    let set = ControlSet::new(controls.clone()).map_err(|e| ctx.err("model.controls", e.to_string()))?;
    let expected_m = match &kind {
        ModelKind::Tcl => 1,
        ModelKind::Affine { b, .. } => b[0].len(),
    };
    if set.dim() != expected_m {
        return Err(ctx.err("model.controls", format!("controls must have {expected_m} components")));
    }
    let horizon = ctx.required("model.horizon", rm.horizon.or(def_horizon))?;

    let is_tcl = matches!(kind, ModelKind::Tcl);
    let grid = GridSpec {
        lo: ctx.required("grid.lo", raw.grid.lo.or(is_tcl.then(|| vec![18.0])))?,
        hi: ctx.required("grid.hi", raw.grid.hi.or(is_tcl.then(|| vec![23.0])))?,
        nodes: ctx.required("grid.nodes", raw.grid.nodes.or(is_tcl.then(|| vec![601])))?,
    };
    ctx.len("grid.lo", &grid.lo, n)?;
    ctx.len("grid.hi", &grid.hi, n)?;
    if grid.nodes.len() != n {
        return Err(ctx.err("grid.nodes", format!("expected {n} entries")));
    }

    let tcl_ambiguity = || {
        let h = tcl_literal_half_width(TCL_SIGMA2);
        AmbiguitySpec {
            support_lo: vec![-h],
            support_hi: vec![h],
            mean: vec![0.0],
            mean_tol: vec![0.1],
            second_moment: vec![vec![TCL_SIGMA2]],
            scale: 1.0,
        }
    };
    let base = if is_tcl { Some(tcl_ambiguity()) } else { None };
    let ambiguity = merge_ambiguity(&raw.ambiguity, base.as_ref(), "ambiguity", l, ctx)?;
    let ambiguity_stages = raw
        .ambiguity
        .stage
        .iter()
        .enumerate()
        .map(|(i, s)| merge_ambiguity(s, Some(&ambiguity), &format!("ambiguity.stage[{i}]"), l, ctx))
        .collect::<Result<Vec<_>, _>>()?;

    let rn = raw.nominal;
    let nominal = resolve_dist(
        rn.kind.as_deref(),
        rn.mean,
        rn.std,
        rn.support_lo,
        rn.support_hi,
        &ambiguity,
        if is_tcl {
            DistKind::TruncatedNormal
        } else {
            DistKind::Uniform
        },
        "nominal",
        ctx,
    )?;
    let rs = raw.simulation;
    let truth = resolve_dist(
        rs.truth.as_deref(),
        rs.truth_mean,
        rs.truth_std,
        None,
        None,
        &ambiguity,
        DistKind::Uniform,
        "simulation",
        ctx,
    )?;
    let x0 = match rs.x0 {
        Some(x) => x,
        None if is_tcl => vec![21.0],
        None => safe_lo.iter().zip(&safe_hi).map(|(a, b)| 0.5 * (a + b)).collect(),
    };
    ctx.len("simulation.x0", &x0, n)?;

    let mode = match raw.run.mode.as_deref() {
        None => RunMode::Robust,
        Some(s) => s.parse().map_err(|e: String| ctx.err("run.mode", e))?,
    };
    let defaults = SipOptions::default();
    let rsol = raw.solver;
    Ok(RunConfig {
        mode,
        alpha: raw.run.alpha.unwrap_or(0.95),
        fallback: raw.run.fallback.unwrap_or(0),
        output_dir: raw.output.dir.unwrap_or_else(|| "out".into()),
        model: ModelSpec {
            kind,
            safe_lo,
            safe_hi,
            controls,
            horizon,
        },
        grid,
        ambiguity,
        ambiguity_stages,
        nominal,
        nominal_atoms: rn.atoms_per_dim.unwrap_or(512),
        sweep_b: raw.sweep.b.unwrap_or_else(|| vec![0.0, 0.05, 0.1]),
        sweep_c: raw.sweep.c.unwrap_or_else(|| vec![1.0]),
        simulation: SimulationSpec {
            truth,
            x0,
            samples: rs.samples.unwrap_or(10_000),
            seed: rs.seed.unwrap_or(2024),
            export_trajectories: rs.export_trajectories.unwrap_or(0),
        },
        audit: AuditSpec {
            samples: raw.audit.samples.unwrap_or(50),
            seed: raw.audit.seed.unwrap_or(7),
            atoms: raw.audit.atoms.unwrap_or_else(|| vec![64, 256, 1024, 4096]),
        },
        solver: SipOptions {
            feas_tol: rsol.feas_tol.unwrap_or(defaults.feas_tol),
            max_iter: rsol.max_iter.unwrap_or(defaults.max_iter),
            prune_slack: rsol.prune_slack.unwrap_or(defaults.prune_slack),
            scan_points: rsol.scan_points.unwrap_or(defaults.scan_points),
        },
    })
}

fn merge_ambiguity(
    raw: &RawAmbiguity,
    base: Option<&AmbiguitySpec>,
    section: &str,
    l: usize,
    ctx: &Ctx,
) -> Result<AmbiguitySpec, ConfigError> {
    let f = |k: &str| format!("{section}.{k}");
    let pick = |v: &Option<Vec<f64>>, b: Option<&Vec<f64>>, k: &str| -> Result<Vec<f64>, ConfigError> {
        let v = ctx.required(&f(k), v.clone().or_else(|| b.cloned()))?;
        ctx.len(&f(k), &v, l)?;
        Ok(v)
    };
    let mean = pick(&raw.mean, base.map(|b| &b.mean), "mean")?;
    let spec = AmbiguitySpec {
        support_lo: pick(&raw.support_lo, base.map(|b| &b.support_lo), "support_lo")?,
        support_hi: pick(&raw.support_hi, base.map(|b| &b.support_hi), "support_hi")?,
        mean_tol: pick(&raw.mean_tol, base.map(|b| &b.mean_tol), "mean_tol")?,
        second_moment: ctx.required(
            &f("second_moment"),
            raw.second_moment
                .clone()
                .or_else(|| base.map(|b| b.second_moment.clone())),
        )?,
        scale: raw.scale.or(base.map(|b| b.scale)).unwrap_or(1.0),
        mean,
    };
    ctx.matrix(&f("second_moment"), &spec.second_moment, l, l)?;
    if spec.mean_tol.iter().any(|b| *b < 0.0) {
        return Err(ctx.err(&f("mean_tol"), "must be >= 0"));
    }
    if spec.scale.is_nan() || spec.scale < 1.0 {
        return Err(ctx.err(&f("scale"), "must be >= 1"));
    }
    Ok(spec)
}

#[allow(clippy::too_many_arguments)]
fn resolve_dist(
    kind: Option<&str>,
    mean: Option<Vec<f64>>,
    std: Option<Vec<f64>>,
    support_lo: Option<Vec<f64>>,
    support_hi: Option<Vec<f64>>,
    amb: &AmbiguitySpec,
    default_kind: DistKind,
    section: &str,
    ctx: &Ctx,
) -> Result<DistSpec, ConfigError> {
    let kind_field = if section == "simulation" {
        "simulation.truth"
    } else {
        "nominal.kind"
    };
    let kind = match kind {
        None => default_kind,
        Some("uniform") => DistKind::Uniform,
        Some("truncated_normal") => DistKind::TruncatedNormal,
        Some(other) => {
            return Err(ctx.err(
                kind_field,
                format!("unknown distribution `{other}` (expected uniform or truncated_normal)"),
            ))
        }
    };
    let (mean_key, std_key) = if section == "simulation" {
        ("simulation.truth_mean", "simulation.truth_std")
    } else {
        ("nominal.mean", "nominal.std")
    };
    let l = amb.mean.len();
    let mean = mean.unwrap_or_else(|| amb.mean.clone());
    ctx.len(mean_key, &mean, l)?;
    // Default spread: half the estimated variance per coordinate.
    let std = std.unwrap_or_else(|| (0..l).map(|i| (amb.second_moment[i][i] / 2.0).sqrt()).collect());
    ctx.len(std_key, &std, l)?;
    let support_lo = support_lo.unwrap_or_else(|| amb.support_lo.clone());
    let support_hi = support_hi.unwrap_or_else(|| amb.support_hi.clone());
    ctx.len(&format!("{section}.support_lo"), &support_lo, l)?;
    ctx.len(&format!("{section}.support_hi"), &support_hi, l)?;
    Ok(DistSpec {
        kind,
        mean,
        std,
        support_lo,
        support_hi,
    })
}
