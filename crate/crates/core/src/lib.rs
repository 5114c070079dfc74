//! Queueing laboratory for comparing size-based scheduling (SRPT, PSJF) with
//! processor sharing when flows arrive in batches and bursts, plus a
//! packet-level virtual fair scheduling admitter.

pub mod analysis;
pub mod distributions;
pub mod error;
pub mod experiments;
pub mod flowsim;
pub mod quadrature;
pub mod vfs;

pub use error::{Error, Result};
