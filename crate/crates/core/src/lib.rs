//! Multi-state transition-rate estimation as Poisson regression, pricing of
//! long-term insurance products from the fitted rates, and fairness
//! adjustments applied before, during or after fitting.

pub mod error;
pub mod fairness;
pub mod glm;
pub mod io;
pub mod model;
pub mod multistate;
pub mod pipeline;
pub mod pricing;
pub mod synthetic;

pub use error::{Error, Result};
