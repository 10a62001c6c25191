//! Symptom-based anomaly detection for multi-tenant cloud traffic.
//!
//! Agents turn mirrored packet headers into per-VM symptom reports, a
//! controller clusters the suspicious ones and checks them for persistence,
//! and confirmed anomalies become throttle plans. [`sim`] generates traffic
//! to exercise all of it; [`pipeline`] wires the pieces together.

pub mod agent;
pub mod config;
pub mod controller;
pub mod error;
pub mod flow;
pub mod mitigation;
pub mod pipeline;
pub mod sim;
pub mod trace;

pub use error::{Error, Result};
