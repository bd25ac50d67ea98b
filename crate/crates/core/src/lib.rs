//! Joint load balancing and auto scaling for `N` parallel finite queues,
//! modeled as a weakly coupled MDP.
//!
//! The crate computes the single-queue transition kernel under geometric
//! batch inter-arrivals, solves the relaxed occupation-measure LP exactly,
//! learns the same solution online with (stochastic) primal-dual gradient
//! descent-ascent, and checks both against a brute-force dynamic program and
//! a finite-`N` simulator.

pub mod cli;
pub mod config;
pub mod error;
pub mod exactdp;
pub mod kernel;
pub mod lp;
pub mod model;
pub mod policy;
pub mod saddle;
pub mod simulator;

pub use error::{Error, Result};
pub use kernel::{compute_kernel, estimate_kernel, EmpiricalKernel, TransitionKernel};
pub use lp::{build_lp, solve_exact, KktReport, LpInstance, LpSolution, OccupationMeasure};
pub use model::{CostModel, FlatIndex, Scenario, SystemParams};
pub use saddle::{gda, sgda, Multipliers, SaddleConfig, SaddleRun};
