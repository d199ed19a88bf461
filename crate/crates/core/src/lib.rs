//! Logical clustering of flow-sensors across separate wireless networks:
//! the flow-table pipeline, a CHORD overlay of sinks, synchronized context
//! registries, and a discrete-event simulator for delay, jitter and loss.

pub mod chord;
pub mod experiment;
pub mod explore;
pub mod metrics;
pub mod model;
pub mod sensor;
pub mod sim;
pub mod sink;

pub use experiment::{load, parse_config, run_sweep, run_sweep_with, ConfigFile, SweepAxis, SweepSpec};
pub use metrics::MetricsReport;
pub use sim::{run, run_with, RunOptions, ScenarioConfig, SimError};
