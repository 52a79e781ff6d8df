//! Scenario loading, the discrete-event run loop and run metrics.

pub mod engine;
pub mod metrics;
pub mod scenario;
pub mod synth;

pub use engine::{compare_baseline, initial_snapshot, run, BaselineComparison, Mode, RunOptions, RunOutput, NORMAL_LABEL};
pub use metrics::{check_integrity, compute_metrics, GroundTruth, SignatureDetection, SimulationReport};
pub use scenario::{load_scenario, Scenario, ScenarioError};
