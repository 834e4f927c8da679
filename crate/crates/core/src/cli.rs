//! `drsafe` command-line front end.
//!
//! Every artifact is a CSV with a one-line header, written to a temporary file
//! in the target directory and renamed into place. Solved recursions are
//! cached in a compact binary file keyed by the config's solve hash.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bellman::{solve_recursion, Solution, StageDiagnostics, StateGrid, ValueFunction};
use crate::config::{ConfigError, RunConfig, RunMode, SolveKind};
use crate::dual_sip::dual_inner_value;
use crate::model::BoxRegion;
use crate::oracle::primal_value;
use crate::policy::{threshold, Fallback, SafetyOrientedController};
use crate::simulate::monte_carlo_with_trajectories;

pub const CACHE_ENV: &str = "DRSAFE_CACHE_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "drsafe",
    version,
    about = "Distributionally robust safe sets and controllers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the backward recursion and write v_t / policy tables.
    Solve(CommonArgs),
    /// Robust solves over the cartesian product of the b and c sweep lists.
    Sweep(CommonArgs),
    /// Compare dual values with the atomized primal oracle at random (t, x, u).
    Audit(CommonArgs),
    /// Monte Carlo closed-loop evaluation of the safety-oriented controller(s).
    Simulate(CommonArgs),
    /// Threshold the value functions and export safe sets and controller tables.
    Safeset(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overrides the simulation and audit seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// robust, nominal or compare.
    #[arg(long)]
    pub mode: Option<RunMode>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid option: {0}")]
    Option(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Solve(String),
}

impl CliError {
    fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Option(_) => 2,
            _ => 1,
        }
    }
}

/// Parses arguments, runs the command and maps errors to exit codes.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

type Handler = fn(&RunConfig, &Path) -> Result<(), CliError>;

pub fn run(command: Command) -> Result<(), CliError> {
    let (args, f): (&CommonArgs, Handler) = match &command {
        Command::Solve(a) => (a, cmd_solve),
        Command::Sweep(a) => (a, cmd_sweep),
        Command::Audit(a) => (a, cmd_audit),
        Command::Simulate(a) => (a, cmd_simulate),
        Command::Safeset(a) => (a, cmd_safeset),
    };
    let (cfg, out) = prepare(args)?;
    match args.threads {
        Some(0) => Err(CliError::Option("--threads must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Option(e.to_string()))?
            .install(|| f(&cfg, &out)),
        None => f(&cfg, &out),
    }
}

/// Loads the config and applies command-line overrides.
pub fn prepare(args: &CommonArgs) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(a) = args.alpha {
        if !(a > 0.0 && a <= 1.0) {
            return Err(CliError::Option(format!("--alpha must lie in (0, 1], got {a}")));
        }
        cfg.alpha = a;
    }
    if let Some(s) = args.seed {
        cfg.simulation.seed = s;
        cfg.audit.seed = s;
    }
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    Ok((cfg, out))
}

pub fn cache_dir(out: &Path) -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| out.join(".cache"))
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io("creating temporary file", e))?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.as_file().sync_all())
        .map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    tmp.persist(path)
        .map_err(|e| CliError::io(format!("renaming into {}", path.display()), e.error))?;
    Ok(())
}

const CACHE_MAGIC: &[u8; 8] = b"DRSFVAL1";

fn encode_solution(key: &str, sol: &Solution) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(key.len() as u64).to_le_bytes());
    buf.extend_from_slice(key.as_bytes());
    let nodes = sol.values[0].values().len();
    buf.extend_from_slice(&(sol.horizon() as u64).to_le_bytes());
    buf.extend_from_slice(&(nodes as u64).to_le_bytes());
    for v in &sol.values {
        for x in v.values() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    for p in &sol.policies {
        for &u in p {
            buf.extend_from_slice(&(u as u32).to_le_bytes());
        }
    }
    buf
}

fn decode_solution(key: &str, bytes: &[u8], grid: &std::sync::Arc<StateGrid>) -> Option<Solution> {
    let mut pos = 0;
    let mut take = |n: usize| -> Option<&[u8]> {
        let s = bytes.get(pos..pos + n)?;
        pos += n;
        Some(s)
    };
    if take(8)? != CACHE_MAGIC {
        return None;
    }
    let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
    let klen = u64_at(take(8)?) as usize;
    if take(klen)? != key.as_bytes() {
        return None;
    }
    let horizon = u64_at(take(8)?) as usize;
    let nodes = u64_at(take(8)?) as usize;
    if nodes != grid.len() {
        return None;
    }
    let mut values = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let raw = take(8 * nodes)?;
        let v: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        values.push(ValueFunction::from_values(t, grid.clone(), v).ok()?);
    }
    let mut policies = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let raw = take(4 * nodes)?;
        policies.push(
            raw.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
                .collect(),
        );
    }
    if pos != bytes.len() {
        return None;
    }
    Some(Solution {
        values,
        policies,
        diagnostics: vec![StageDiagnostics::default(); horizon],
    })
}

/// Solves one recursion, reusing the cached result when the solve key matches.
/// Returns the solution and whether it came from the cache.
pub fn solve_cached(cfg: &RunConfig, kind: SolveKind, cache: &Path) -> Result<(Solution, bool), CliError> {
    let key = cfg.solve_key(kind);
    let model = cfg.build_model();
    let grid = cfg.build_grid(&model);
    let path = cache.join(format!("{}-{}.bin", kind.label(), &key[..16]));
    if let Ok(bytes) = std::fs::read(&path) {
        if let Some(sol) = decode_solution(&key, &bytes, &grid) {
            log::info!(
                "cache hit for {} solve ({}), skipping recomputation",
                kind.label(),
                &key[..16]
            );
            return Ok((sol, true));
        }
        log::warn!("ignoring stale cache file {}", path.display());
    }
    let mode = cfg.mode_for(kind).map_err(CliError::Solve)?;
    log::info!("solving {} recursion over {} stages", kind.label(), model.horizon);
    let sol =
        solve_recursion(&model, &mode, grid, &cfg.backup_options()).map_err(|e| CliError::Solve(e.to_string()))?;
    let unconverged: usize = sol.diagnostics.iter().map(|d| d.unconverged).sum();
    if unconverged > 0 {
        log::warn!("{unconverged} dual solves hit the iteration limit");
    }
    atomic_write(&path, &encode_solution(&key, &sol))?;
    Ok((sol, false))
}

fn coord_header(prefix: &str, n: usize) -> String {
    (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(",")
}

fn coords(x: &[f64]) -> String {
    x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn kind_dir(cfg: &RunConfig, out: &Path, kind: SolveKind) -> PathBuf {
    if cfg.solve_kinds().len() > 1 {
        out.join(kind.label())
    } else {
        out.to_path_buf()
    }
}

/// Value-function CSVs: one file per stage, `v_000.csv` .. `v_TTT.csv`.
pub fn write_value_tables(dir: &Path, sol: &Solution) -> Result<(), CliError> {
    for (t, v) in sol.values.iter().enumerate() {
        let grid = v.grid();
        let mut s = format!("t,node,{},value,control_index\n", coord_header("x", grid.dim()));
        for k in 0..grid.len() {
            let u = sol.policies.get(t).map(|p| p[k].to_string()).unwrap_or_default();
            let _ = writeln!(s, "{t},{k},{},{},{u}", coords(&grid.node(k)), v.value_at_node(k));
        }
        atomic_write(&dir.join(format!("v_{t:03}.csv")), s.as_bytes())?;
    }
    Ok(())
}

pub fn cmd_solve(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let cache = cache_dir(out);
    for kind in cfg.solve_kinds() {
        let (sol, _) = solve_cached(cfg, kind, &cache)?;
        let dir = kind_dir(cfg, out, kind);
        write_value_tables(&dir, &sol)?;
        log::info!("wrote {} value tables to {}", sol.values.len(), dir.display());
    }
    Ok(())
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let model = cfg.build_model();
    let n = model.dynamics.state_dim();
    let mut rows = format!("b,c,node,{},value\n", coord_header("x", n));
    let mut failures = String::from("b,c,error\n");
    for &b in &cfg.sweep_b {
        for &c in &cfg.sweep_c {
            let result = cfg.ambiguity_schedule(Some(b), Some(c)).and_then(|s| {
                let grid = cfg.build_grid(&model);
                solve_recursion(&model, &crate::bellman::Mode::Robust(s), grid, &cfg.backup_options())
                    .map_err(|e| e.to_string())
            });
            match result {
                Ok(sol) => {
                    let v0 = &sol.values[0];
                    for k in 0..v0.grid().len() {
                        let _ = writeln!(
                            rows,
                            "{b},{c},{k},{},{}",
                            coords(&v0.grid().node(k)),
                            v0.value_at_node(k)
                        );
                    }
                    log::info!(
                        "sweep b={b} c={c}: max v_0 = {}",
                        v0.values().iter().cloned().fold(0.0, f64::max)
                    );
                }
                Err(e) => {
                    log::error!("sweep b={b} c={c} failed: {e}");
                    let _ = writeln!(failures, "{b},{c},\"{}\"", e.replace('"', "'"));
                }
            }
        }
    }
    atomic_write(&out.join("sweep.csv"), rows.as_bytes())?;
    atomic_write(&out.join("sweep_failures.csv"), failures.as_bytes())
}

/// One audited `(t, x, u)` sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub t: usize,
    pub x: Vec<f64>,
    pub u: usize,
    pub dual: f64,
    /// Oracle value per atom count, in the order of `audit.atoms`.
    pub primal: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Relaxed objective sequence never increased (beyond 1e-10).
    pub monotone: bool,
    /// Minimum certificate slack on a grid 4x finer than the search scan.
    pub verify_residual: f64,
}

impl AuditRow {
    pub fn gap(&self) -> f64 {
        (self.dual - self.primal[self.primal.len() - 1]).abs()
    }

    pub fn weak_duality_violated(&self) -> bool {
        self.primal.iter().any(|p| self.dual > p + 1e-6)
    }
}

/// Audits `cfg.audit.samples` random triples against the robust solution.
pub fn audit_rows(cfg: &RunConfig, sol: &Solution) -> Result<Vec<AuditRow>, CliError> {
    use rayon::prelude::*;
    let model = cfg.build_model();
    let schedule = cfg.ambiguity_schedule(None, None).map_err(CliError::Solve)?;
    let horizon = model.horizon;
    if horizon == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.audit.seed);
    let region = model.safe_region.clone();
    let triples: Vec<(usize, Vec<f64>, usize)> = (0..cfg.audit.samples)
        .map(|_| {
            let t = rng.random_range(0..horizon);
            let x = region
                .lo()
                .iter()
                .zip(region.hi())
                .map(|(a, b)| rng.random_range(*a..=*b))
                .collect();
            let u = rng.random_range(0..model.controls.len());
            (t, x, u)
        })
        .collect();
    triples
        .into_par_iter()
        .map(|(t, x, u)| {
            let amb = schedule.get(t);
            let v_next = &sol.values[t + 1];
            let uv = model.controls.get(u);
            let (dual, cert) = dual_inner_value(&x, uv, v_next, &model.dynamics, amb, &cfg.solver)
                .map_err(|e| CliError::Solve(format!("audit t={t} x={x:?} u={u}: {e}")))?;
            let g = |w: &[f64]| v_next.eval(&model.dynamics.step_unchecked(&x, uv, w));
            let primal = cfg
                .audit
                .atoms
                .iter()
                .map(|&atoms| primal_value(amb, g, atoms).map(|p| p.value))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Solve(format!("audit oracle t={t} x={x:?} u={u}: {e}")))?;
            let monotone = cert.objective_history.windows(2).all(|w| w[1] <= w[0] + 1e-10);
            let verify = verification_grid(amb.support(), 4 * cfg.solver.scan_points);
            let verify_residual = verify
                .iter()
                .map(|w| cert.multipliers.constraint(amb, w, g(w)))
                .fold(f64::INFINITY, f64::min);
            Ok(AuditRow {
                t,
                x,
                u,
                dual,
                primal,
                converged: cert.converged,
                iterations: cert.iterations,
                monotone,
                verify_residual,
            })
        })
        .collect()
}

/// Uniform grid with `points` per dimension (capped in total for l > 1).
pub fn verification_grid(support: &BoxRegion, points: usize) -> Vec<Vec<f64>> {
    let l = support.dim();
    let per_dim = if l == 1 {
        points
    } else {
        (points as f64).powf(1.0 / l as f64).ceil().max(3.0) as usize * 2
    };
    let axes: Vec<Vec<f64>> = (0..l)
        .map(|i| {
            let (a, b) = (support.lo()[i], support.hi()[i]);
            (0..per_dim)
                .map(|k| a + (b - a) * k as f64 / (per_dim - 1) as f64)
                .collect()
        })
        .collect();
    let mut out = vec![Vec::new()];
    for axis in &axes {
        out = out
            .into_iter()
            .flat_map(|p| axis.iter().map(move |&a| [p.as_slice(), &[a]].concat()))
            .collect();
    }
    out
}

pub fn cmd_audit(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (sol, _) = solve_cached(cfg, SolveKind::Robust, &cache_dir(out))?;
    let rows = audit_rows(cfg, &sol)?;
    let n = cfg.model.safe_lo.len();
    let primal_cols: Vec<String> = cfg.audit.atoms.iter().map(|a| format!("primal_{a}")).collect();
    let mut s = format!(
        "sample,t,{},u,dual,{},gap,weak_duality_violation,converged,iterations,monotone,verify_residual\n",
        coord_header("x", n),
        primal_cols.join(",")
    );
    for (i, r) in rows.iter().enumerate() {
        let primal: Vec<String> = r.primal.iter().map(f64::to_string).collect();
        let _ = writeln!(
            s,
            "{i},{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            coords(&r.x),
            r.u,
            r.dual,
            primal.join(","),
            r.gap(),
            r.weak_duality_violated() as u8,
            r.converged as u8,
            r.iterations,
            r.monotone as u8,
            r.verify_residual
        );
    }
    atomic_write(&out.join("audit.csv"), s.as_bytes())?;
    let max_gap = rows.iter().map(AuditRow::gap).fold(0.0, f64::max);
    let violations = rows.iter().filter(|r| r.weak_duality_violated()).count();
    let unconverged = rows.iter().filter(|r| !r.converged).count();
    println!(
        "audit: {} samples, max gap {max_gap:.3e}, weak duality violations {violations}, unconverged {unconverged}",
        rows.len()
    );
    Ok(())
}

pub fn build_controller(
    cfg: &RunConfig,
    kind: SolveKind,
    sol: &Solution,
) -> Result<SafetyOrientedController, CliError> {
    SafetyOrientedController::from_solution(
        cfg.build_model(),
        sol,
        cfg.alpha,
        Fallback::Constant(cfg.fallback),
        cfg.supports(kind),
    )
    .map_err(|e| CliError::Solve(e.to_string()))
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let cache = cache_dir(out);
    let truth = cfg.truth();
    let sim = &cfg.simulation;
    let n = cfg.model.safe_lo.len();
    for kind in cfg.solve_kinds() {
        let (sol, _) = solve_cached(cfg, kind, &cache)?;
        let controller = build_controller(cfg, kind, &sol)?;
        let (report, trajectories) = monte_carlo_with_trajectories(&controller, &truth, &sim.x0, sim.samples, sim.seed);
        let label = kind.label();
        let report_csv = format!(
            "controller,alpha,samples,safe_count,probability,std_error,seed\n{label},{},{},{},{},{},{}\n",
            cfg.alpha,
            report.samples,
            report.safe_count,
            report.probability,
            report.standard_error(),
            report.seed
        );
        atomic_write(&out.join(format!("report_{label}.csv")), report_csv.as_bytes())?;
        let mut bp = String::from("controller,t,min,q1,median,q3,max\n");
        for (t, q) in report.quantiles.iter().enumerate() {
            let _ = writeln!(bp, "{label},{t},{},{},{},{},{}", q.min, q.q1, q.median, q.q3, q.max);
        }
        atomic_write(&out.join(format!("boxplot_{label}.csv")), bp.as_bytes())?;
        if sim.export_trajectories > 0 {
            let mut tr = format!("sample,t,{},control,branch,safe\n", coord_header("x", n));
            for (i, traj) in trajectories.iter().take(sim.export_trajectories).enumerate() {
                for (t, x) in traj.states.iter().enumerate() {
                    let (u, b) = match (traj.controls.get(t), traj.branches.get(t)) {
                        (Some(u), Some(b)) => (u.to_string(), b.as_str()),
                        _ => (String::new(), ""),
                    };
                    let _ = writeln!(tr, "{i},{t},{},{u},{b},{}", coords(x), traj.safe as u8);
                }
            }
            atomic_write(&out.join(format!("trajectories_{label}.csv")), tr.as_bytes())?;
        }
        println!(
            "{label}: {}/{} trajectories safe, probability {:.4} (alpha {})",
            report.safe_count, report.samples, report.probability, cfg.alpha
        );
    }
    Ok(())
}

pub fn cmd_safeset(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let cache = cache_dir(out);
    for kind in cfg.solve_kinds() {
        let (sol, _) = solve_cached(cfg, kind, &cache)?;
        let sets = threshold(&sol.values, cfg.alpha).map_err(|e| CliError::Solve(e.to_string()))?;
        let controller = build_controller(cfg, kind, &sol)?;
        let grid = sets.grid().clone();
        let header = coord_header("x", grid.dim());
        let mut members = format!("t,node,{header},member\n");
        for t in 0..=sets.horizon() {
            for k in 0..grid.len() {
                let _ = writeln!(
                    members,
                    "{t},{k},{},{}",
                    coords(&grid.node(k)),
                    sets.node_member(t, k) as u8
                );
            }
        }
        let mut table = format!("t,node,{header},branch,control\n");
        for t in 0..sets.horizon() {
            for k in 0..grid.len() {
                let x = grid.node(k);
                let d = controller.act(&x, t);
                let _ = writeln!(table, "{t},{k},{},{},{}", coords(&x), d.branch.as_str(), d.control);
            }
        }
        let dir = kind_dir(cfg, out, kind);
        atomic_write(&dir.join("safeset.csv"), members.as_bytes())?;
        atomic_write(&dir.join("controller.csv"), table.as_bytes())?;
        if grid.dim() == 1 {
            let iv: Vec<String> = sets.intervals(0).iter().map(|(a, b)| format!("[{a}, {b}]")).collect();
            println!(
                "{}: S_(alpha={},0) = {}",
                kind.label(),
                cfg.alpha,
                if iv.is_empty() { "empty".into() } else { iv.join(" U ") }
            );
        }
    }
    Ok(())
}
