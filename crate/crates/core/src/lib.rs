//! Core planning logic for emulated fog testbeds.
//!
//! Everything in this crate is pure: no sockets, no processes, no wall clock.
//! The runtime pieces (agents, providers, the CLI) live in the `fogbed` crate
//! and the browser demo compiles this crate to WebAssembly unchanged.
//!
//! - [`infra`]: the infrastructure graph, effective path properties and
//!   machine type selection.
//! - [`netem`]: per-agent impairment tables, delay compensation and
//!   traffic-control script rendering.
//! - [`app`]: container configurations, deployment mappings and environment
//!   resolution.
//! - [`schedule`]: orchestration schedules, transition conditions and the
//!   state-machine engine that drives an experiment.

pub mod app;
pub mod infra;
pub mod netem;
pub mod schedule;
pub mod units;

pub use infra::{InfrastructureModel, NodeId};
