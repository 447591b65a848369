//! Simulation of human-in-the-loop (HITL) and AI-in-the-loop (AIITL)
//! classification systems.

pub mod allocation;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod experts;
pub mod ids;
pub mod metrics;
pub mod nn;
pub mod ood;
pub mod report;
pub mod simulation;

pub use error::{Error, Result};
