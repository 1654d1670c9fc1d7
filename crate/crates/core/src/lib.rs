//! Privacy-preserving AIMD resource allocation.
//!
//! Agents share several capacity-constrained resources. Each step they grow
//! their demand additively; when the aggregate hits capacity a one-bit signal
//! tells them to back off by a factor derived from a noisy marginal cost. The
//! long-run averages approach the social optimum while the noise protects
//! each agent's cost function.

pub mod baseline;
pub mod dp;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod rng;

pub use baseline::{solve_grid_oracle, solve_optimum, OptimalAllocation};
pub use dp::{gaussian_sigma, laplace_scale, NoiseKind, NoiseSpec, ScaleMode, SensitivityScope};
pub use engine::{run, run_with, RunStats, Simulation, StepOutcome};
pub use error::{Error, Result};
pub use metrics::{MetricsRecorder, RunSummary};
pub use model::{AgentSpec, CostFunction, ResourceConfig, SystemConfig, Term};
