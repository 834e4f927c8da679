//! Distributionally robust safe sets and safety-oriented controllers for
//! discrete-time stochastic systems whose disturbance law is only known
//! through its support, a mean interval and a second-moment bound.
//!
//! Pipeline:
//! - [`model`]: dynamics, safe box, admissible controls (plus the TCL preset);
//! - [`ambiguity`]: moment ambiguity sets and nominal laws;
//! - [`oracle`]: brute-force atomized primal LP (ground truth);
//! - [`dual_sip`]: dual semi-infinite program solved by an exchange method;
//! - [`bellman`]: gridded value functions and the backward recursion;
//! - [`policy`]: thresholded safe sets and the safety-oriented controller;
//! - [`simulate`]: Monte Carlo closed-loop evaluation;
//! - [`config`] / [`cli`]: the `drsafe` command-line front end.

pub mod ambiguity;
pub mod bellman;
pub mod cli;
pub mod config;
pub mod dual_sip;
pub mod lp;
pub mod model;
pub mod oracle;
pub mod policy;
pub mod simulate;

pub use ambiguity::{AmbiguityError, AtomList, MomentAmbiguitySet, NominalDistribution};
pub use bellman::{
    backup, solve_recursion, terminal, BackupOptions, BellmanError, Mode, Schedule, Solution, StageMode, StateGrid,
    ValueFunction,
};
pub use dual_sip::{dual_inner_value, solve_dual, DualCertificate, Payoff, PiecewiseLinear, SipOptions};
pub use model::{tcl_preset, BoxRegion, ControlSet, Dynamics, Model, SafeRegion, TclParams};
pub use oracle::{nominal_expectation, primal_value};
pub use policy::{threshold, Branch, Fallback, SafeSetFamily, SafetyOrientedController};
pub use simulate::{monte_carlo, rollout, SimulationReport};
