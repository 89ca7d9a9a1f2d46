//! Optimal dosing of a two-population (healthy and cancer cell) nonlocal
//! reaction-diffusion model under state constraints.
//!
//! The pipeline first solves a simplified bang-bang problem over two
//! switching times ([`pmp`]), then continues from it to the full problem
//! with a direct method ([`direct`]) driven by [`continuation`].

pub mod boxmin;
pub mod continuation;
pub mod direct;
pub mod error;
pub mod forward;
pub mod grid;
pub mod model;
pub mod pmp;
pub mod scenario;

pub use continuation::{run_schedule, ContinuationConfig, ContinuationSchedule, RampStep, RunRecord, StepRecord};
pub use direct::{solve_ocp, ReducedProblem, SolveReport, SolverOptions};
pub use error::{Error, Result};
pub use forward::{rollout, ControlSchedule, StateTrajectory};
pub use grid::{PhenotypeGrid, TimeGrid};
pub use model::{ContinuationVector, InitialData, ModelParameters};
pub use scenario::{Scenario, TestCase};
