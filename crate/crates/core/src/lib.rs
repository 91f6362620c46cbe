//! Adaptive ensemble workflow engine.
//!
//! Workflows are described as pipelines of stages of tasks. Post-execution
//! hooks on stages and pipelines inspect finished work and adapt the
//! not-yet-executed part of the task graph while the workflow runs, on a
//! simulated pilot resource pool.

pub mod adapt;
pub mod bus;
pub mod cli;
pub mod clock;
pub mod drivers;
pub mod exec;
pub mod model;
pub mod orchestrator;
pub mod profiler;
