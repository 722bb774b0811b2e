//! Experiment drivers behind the `lqpg` binary.
//!
//! Every experiment is a pure function from a resolved configuration to a
//! set of named CSV bodies, so reports can be tested byte-for-byte without
//! touching the filesystem. Replication fan-out is deterministic: each
//! replication derives its own random streams from `(seed, replication
//! index)`, results are collected by index, and serialization happens in
//! index order — thread count can change wall-clock only.

pub mod experiments;
pub mod report;

pub use experiments::{
    run_experiment, ExperimentConfig, ExperimentKind, ScheduleChoice,
};
pub use report::ExperimentReport;
