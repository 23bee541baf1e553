//! Monte-Carlo coverage simulation.

pub mod rng;
pub mod runner;
pub mod sampling;
pub mod scenario;

pub use rng::SimRng;
pub use runner::{
    aggregate, mc_standard_error, replicate, run_grid, run_replication, run_scenario, simulate_dataset,
    CoefficientMetrics, CompletedReplication, Diagnostics, EstimatorMetrics, ReplicationRecord, ScenarioMetrics,
};
pub use sampling::{generate_study, group_size_vector, sample_moderators, sample_random_effect, ReDist};
pub use scenario::{scenario_grid, GridConfig, ScenarioSpec};
