//! Poisson regression engine: each transition's intensity is a GLM with
//! log link, event counts as response and log exposure as offset.

mod encoding;
mod financial;
mod irls;
mod rate_model;

pub use encoding::{AgeTerm, Encoding, Formula, Term, AGE, INTERCEPT, SENSITIVE};
pub use financial::{transform_financial, FinancialCovariates};
pub use irls::{
    dependent_columns, fit_poisson, fit_poisson_with, likelihood_contribution, DesignMatrix, FitResult, IrlsConfig,
};
pub use rate_model::{predict_rate, GlmRateModel};
