//! Equilibria and inefficiency metrics for nonatomic congestion games whose
//! traffic is routed by a set of competing controllers ("operating systems").
//!
//! The crate covers the full pipeline:
//!
//! - [`game`]: networks with polynomial edge costs, demand populations,
//!   information types, controller assignments, and validation.
//! - [`equilibrium`]: user equilibria and social optima by convex potential
//!   minimization.
//! - [`control`]: the control game where each operating system routes its
//!   own share to minimize its subpopulation's total cost.
//! - [`analytics`]: closed-form price-of-anarchy expressions on the Pigou
//!   network and empirical sweeps that cross-check them against the solvers.
//! - [`os_choice`]: the outer game where populations pick their controller;
//!   its dynamics settle on proportional control.
//! - [`learning`]: exponential-weights learners playing the repeated control
//!   game.
//! - [`io`]: the `.game` file format and CSV emission helpers.

pub mod analytics;
pub mod control;
pub mod equilibrium;
pub mod game;
pub mod instances;
pub mod io;
pub mod learning;
pub mod os_choice;
mod solver;

pub use equilibrium::{EquilibriumResult, FlowProfile, SolveError, SolveOptions};
pub use game::{GameInstance, ValidationReport};
