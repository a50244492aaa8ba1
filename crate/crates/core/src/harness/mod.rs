//! Experiment orchestration: configuration, synthetic data, the equivalence
//! suite, end-to-end experiments and reports.
//!
//! All randomness flows from the configured seed through [`synth::component_rng`],
//! a ChaCha8 generator with one stream per pipeline component.

pub mod config;
pub mod experiment;
pub mod pipeline;
pub mod report;
pub mod suite;
pub mod synth;

pub use config::ExperimentConfig;
pub use experiment::run_experiment;
pub use report::{emit_report, Check, Format, RunReport, Table};
pub use suite::run_equivalence_suite;
