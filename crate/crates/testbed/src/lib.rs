//! Testbed runtime: node agents, providers, the application manager and
//! the orchestrator that drives experiment schedules against them.

pub mod agent;
pub mod procs;
pub mod proxy;
pub mod runtime;
pub mod client;
pub mod provider;
pub mod manager;
pub mod appmgr;
pub mod cli;
pub mod mockapp;
