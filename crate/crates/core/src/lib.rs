//! Price-responsive thermostatically controlled loads in a capacity-limited
//! feeder market: thermal dynamics, bidding agents, market clearing, and
//! output-based parameter estimation.

// Parameter checks use `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod error;
pub mod estimation;
pub mod ingest;
pub mod market;
pub mod scenario;
pub mod thermal;

pub use error::{Error, Result};
