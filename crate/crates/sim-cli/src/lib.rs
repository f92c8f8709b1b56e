//! Orchestration layer over the simulator core: config parsing, the
//! per-seed run loop with metrics persistence, parameter sweeps, and
//! cross-run comparison reports.

pub mod config;
pub mod report;
pub mod runner;
