//! Branch-and-bound laboratory for learning variable selection.
//!
//! The crate bundles a small MILP toolkit (instances, a bounded-variable
//! simplex, a best-bound branch-and-bound driver) with the learning side of
//! the pipeline: strong-branching labels, a bipartite graph convolutional
//! policy, DAgger-style data aggregation and weight averaging of the models
//! produced along the way.

pub mod bnb;
pub mod branching;
pub mod cli;
pub mod dagger;
pub mod ensemble;
pub mod eval;
pub mod lp;
pub mod milp;
pub mod nn;
pub mod seeds;
pub mod state;

pub use bnb::{dual_integral, run_bnb, BnbConfig, BnbError, BnbTrace};
pub use branching::{BranchDecision, BranchingPolicy, PolicyError, PolicySpec};
pub use lp::{solve_lp, BasisStatus, BoundOverrides, LpSolution, LpStatus};
pub use milp::{MilpInstance, Sense};
pub use nn::{ArchConfig, ModelParams, TrainConfig};
pub use state::BipartiteState;
