//! Simulation toolkit for two-class accumulating priority queues and the
//! tandem fluid queue they map onto.
//!
//! The crate provides:
//! - [`stochastics`]: phase-type service-time distributions and reproducible
//!   seeded random streams;
//! - [`apq`]: a discrete-event simulator of the two-class accumulating
//!   priority queue producing a full event log;
//! - [`mpp`]: construction of the maximum priority process path from an
//!   event log, jump classification and embedded post-jump sampling;
//! - [`fluid`]: an exact event-driven simulator of the tandem fluid queue
//!   with analytic boundary-hitting times;
//! - [`mapping`]: the parameter mapping between the two models and the
//!   statistical machinery (KS, chi-square, embedded-distribution
//!   comparison) that verifies their equivalence;
//! - [`cli`]: the command-line front end (config parsing, CSV/JSON
//!   emission, exit-code contract).

pub mod apq;
pub mod cli;
pub mod fluid;
pub mod mapping;
pub mod mpp;
pub mod stats;
pub mod stochastics;
