//! Configuration, orchestration, trace files and reports behind the CLI.

pub mod bounds;
pub mod config;
pub mod congestion;
pub mod experiment;
pub mod trace;

pub use bounds::BoundsReport;
pub use config::{Algorithm, Algorithms, ExperimentConfig, MdpConfig, NetworkConfig, ObservationConfig, QdConfig};
pub use congestion::{policy_report, run_congestion, CongestionReport};
pub use experiment::{execute, run_experiment, run_seed, sweep, ExperimentReport, RunSetup, SweepParam, SweepReport};
pub use trace::{aggregate, plateau, steps_to_half, Trace, TraceMeta, CSV_HEADER};
