//! Multilayer false-discovery-rate-controlled feature detection via
//! generalized e-values: converts FDR-controlling base procedures into
//! e-values, aggregates replicated runs, and filters selections so that
//! feature-level and group-level FDR are controlled simultaneously.

pub mod efilter;
pub mod error;
pub mod evalue;
pub mod io;
pub mod knockoff;
pub mod mirror;
pub mod model;
pub mod pipeline;
pub mod regression;
pub mod seeds;
pub mod simlab;

pub use error::{Error, Result};
