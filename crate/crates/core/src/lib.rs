//! Treatment-effect estimation for firm panels under an emissions trading
//! scheme.
//!
//! Two designs are provided. The first contrasts log-outcome changes of
//! regulated firms with propensity-score matched (or odds-reweighted)
//! controls. The second fits a stochastic production frontier per industry
//! and applies the same matched contrast to each firm's distance to the
//! frontier. A synthetic panel generator with known effects backs the
//! recovery tests.

pub mod att;
pub mod descstats;
pub mod error;
pub mod frontier;
pub mod matching;
mod optim;
pub mod panel;
pub mod pipeline;
pub mod propensity;
pub mod regression;
pub mod satt;
pub mod stats;
pub mod synthgen;

pub use error::{Error, ErrorKind, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
