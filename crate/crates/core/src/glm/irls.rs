//! Poisson regression with log link and log-exposure offset, fitted by
//! iteratively reweighted least squares.
//!
//! For the canonical log link the IRLS update
//! `(X'WX) b_new = X'W z`, with `W = diag(mu)` and working response
//! `z = eta - offset + (y - mu) / mu`, is a Newton step on the Poisson
//! log-likelihood. It is solved here in increment form,
//! `(X'WX) delta = X'(y - mu)`, which avoids forming `z` when `mu` is tiny.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::glm::encoding::{Encoding, INTERCEPT};
use crate::model::{ExposureRow, RateQuery};

/// Columns, response counts and `ln(exposure)` offsets of one regression.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    columns: Vec<String>,
    sources: Vec<String>,
    x: DMatrix<f64>,
    response: DVector<f64>,
    offset: DVector<f64>,
}

impl DesignMatrix {
    pub fn new(columns: Vec<String>, x: DMatrix<f64>, response: DVector<f64>, offset: DVector<f64>) -> Result<Self> {
        let sources = columns.clone();
        Self::with_sources(columns, sources, x, response, offset)
    }

    pub fn with_sources(
        columns: Vec<String>,
        sources: Vec<String>,
        x: DMatrix<f64>,
        response: DVector<f64>,
        offset: DVector<f64>,
    ) -> Result<Self> {
        if columns.len() != x.ncols() || sources.len() != x.ncols() {
            return Err(Error::invalid("column names do not match design width"));
        }
        if response.len() != x.nrows() || offset.len() != x.nrows() {
            return Err(Error::invalid("response/offset length does not match rows"));
        }
        if offset.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid("non-finite offset (exposure must be > 0)"));
        }
        if response.iter().any(|y| !(y.is_finite() && *y >= 0.0)) {
            return Err(Error::invalid("responses must be finite non-negative counts"));
        }
        Ok(Self {
            columns,
            sources,
            x,
            response,
            offset,
        })
    }

    /// Encodes exposure rows: response = event count, offset = ln(exposure).
    pub fn from_rows(rows: &[ExposureRow], encoding: &Encoding) -> Result<Self> {
        let p = encoding.width();
        let mut data = Vec::with_capacity(rows.len() * p);
        let mut buf = Vec::with_capacity(p);
        for row in rows {
            buf.clear();
            let q = RateQuery::new(&row.covariates, row.sensitive.as_deref());
            encoding.encode_into(&q, row.age, &mut buf)?;
            data.extend_from_slice(&buf);
        }
        let x = DMatrix::from_row_slice(rows.len(), p, &data);
        let response = DVector::from_iterator(rows.len(), rows.iter().map(|r| f64::from(r.event)));
        let offset = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.exposure.ln()));
        Self::with_sources(
            encoding.columns().to_vec(),
            encoding.sources().to_vec(),
            x,
            response,
            offset,
        )
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn response(&self) -> &DVector<f64> {
        &self.response
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    /// Same design with offsets replaced.
    pub fn with_offset(&self, offset: DVector<f64>) -> Result<Self> {
        Self::with_sources(
            self.columns.clone(),
            self.sources.clone(),
            self.x.clone(),
            self.response.clone(),
            offset,
        )
    }

    /// Columns derived from `source`: an exact match, or a `source.` prefix
    /// for grouped covariates such as the three wealth columns.
    fn matches_source(col_source: &str, source: &str) -> bool {
        col_source == source
            || col_source
                .strip_prefix(source)
                .is_some_and(|rest| rest.starts_with('.'))
    }

    /// Design without the columns derived from `source`.
    pub fn drop_source(&self, source: &str) -> Result<Self> {
        let keep: Vec<usize> = (0..self.ncols())
            .filter(|&j| !Self::matches_source(&self.sources[j], source))
            .collect();
        if keep.len() == self.ncols() {
            return Err(Error::UnknownCovariate(source.to_string()));
        }
        let x = self.x.select_columns(&keep);
        Self::with_sources(
            keep.iter().map(|&j| self.columns[j].clone()).collect(),
            keep.iter().map(|&j| self.sources[j].clone()).collect(),
            x,
            self.response.clone(),
            self.offset.clone(),
        )
    }

    /// The same design without identically zero columns.
    pub fn without_zero_columns(&self) -> Result<Self> {
        let keep: Vec<usize> = (0..self.ncols())
            .filter(|&j| self.x.column(j).iter().any(|v| *v != 0.0))
            .collect();
        Self::with_sources(
            keep.iter().map(|&j| self.columns[j].clone()).collect(),
            keep.iter().map(|&j| self.sources[j].clone()).collect(),
            self.x.select_columns(&keep),
            self.response.clone(),
            self.offset.clone(),
        )
    }

    /// Poisson log-likelihood at `beta`, including the `-ln y!` constant.
    pub fn log_likelihood(&self, beta: &DVector<f64>) -> f64 {
        let eta = &self.x * beta + &self.offset;
        eta.iter()
            .zip(self.response.iter())
            .map(|(&e, &y)| y * e - e.exp() - ln_factorial(y))
            .sum()
    }
}

fn ln_factorial(y: f64) -> f64 {
    if y == 0.0 || y == 1.0 {
        0.0
    } else {
        ln_gamma(y + 1.0)
    }
}

#[derive(Debug, Clone)]
pub struct IrlsConfig {
    pub max_iterations: usize,
    /// Relative deviance change treated as a stall.
    pub deviance_tolerance: f64,
    /// Max-norm of the score at which the fit is declared converged.
    pub gradient_tolerance: f64,
    pub max_halvings: usize,
    /// Relative diagonal threshold of the pivoted QR used for rank detection.
    pub rank_tolerance: f64,
}

impl Default for IrlsConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            deviance_tolerance: 1e-10,
            gradient_tolerance: 1e-8,
            max_halvings: 20,
            rank_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub columns: Vec<String>,
    pub sources: Vec<String>,
    pub coefficients: DVector<f64>,
    pub std_errors: DVector<f64>,
    /// Inverse observed information at the optimum.
    pub covariance: Option<DMatrix<f64>>,
    pub log_likelihood: f64,
    pub deviance: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
}

impl FitResult {
    pub fn coefficient(&self, column: &str) -> Option<f64> {
        self.columns
            .iter()
            .position(|c| c == column)
            .map(|j| self.coefficients[j])
    }

    pub fn std_error(&self, column: &str) -> Option<f64> {
        self.columns
            .iter()
            .position(|c| c == column)
            .map(|j| self.std_errors[j])
    }
}

pub fn fit_poisson(design: &DesignMatrix) -> Result<FitResult> {
    fit_poisson_with(design, &IrlsConfig::default())
}

pub fn fit_poisson_with(design: &DesignMatrix, config: &IrlsConfig) -> Result<FitResult> {
    let (n, p) = (design.nrows(), design.ncols());
    if p == 0 {
        return Err(Error::DegenerateDesign("no columns".into()));
    }
    if n < p {
        return Err(Error::DegenerateDesign(format!("{n} rows < {p} columns")));
    }
    for j in 0..p {
        if design.x.column(j).iter().all(|v| *v == 0.0) {
            return Err(Error::DegenerateDesign(format!(
                "column `{}` is identically zero",
                design.columns[j]
            )));
        }
    }
    let dependent = dependent_columns(&design.x, config.rank_tolerance);
    if !dependent.is_empty() {
        return Err(Error::Collinear {
            columns: dependent.into_iter().map(|j| design.columns[j].clone()).collect(),
        });
    }

    let y = &design.response;
    if y.iter().all(|v| *v == 0.0) {
        // the likelihood keeps increasing as the rate goes to zero
        return Err(Error::Diverged { iterations: 0 });
    }
    let mut beta = initial_beta(design);
    let mut state = Evaluation::at(design, &beta);
    let mut iterations = 0;
    let mut stalled = 0;
    let mut converged = state.gradient_norm <= config.gradient_tolerance;

    while !converged && iterations < config.max_iterations {
        iterations += 1;
        let info = weighted_crossprod(&design.x, &state.mu);
        let Some(chol) = info.cholesky() else {
            return Err(Error::Numerical("information matrix not positive definite".into()));
        };
        let score = design.x.tr_mul(&(y - &state.mu));
        let mut step = chol.solve(&score);

        let mut candidate = &beta + &step;
        let mut next = Evaluation::at(design, &candidate);
        let mut halvings = 0;
        // near the optimum the likelihood change drops below roundoff
        let slack = 1e-12 * (1.0 + state.log_likelihood.abs());
        while !(next.log_likelihood.is_finite() && next.log_likelihood >= state.log_likelihood - slack)
            && halvings < config.max_halvings
        {
            step /= 2.0;
            candidate = &beta + &step;
            next = Evaluation::at(design, &candidate);
            halvings += 1;
        }
        if !next.log_likelihood.is_finite() {
            return Err(Error::Diverged { iterations });
        }

        let dev_change = (next.deviance - state.deviance).abs() / (next.deviance.abs() + 0.1);
        beta = candidate;
        state = next;

        if state.gradient_norm <= config.gradient_tolerance {
            converged = true;
        } else if dev_change < config.deviance_tolerance {
            // one more Newton step usually lands the score at roundoff level
            stalled += 1;
            if stalled > 2 {
                converged = state.gradient_norm <= config.gradient_tolerance;
                break;
            }
        } else {
            stalled = 0;
        }
    }
    if !converged {
        return Err(Error::Diverged { iterations });
    }

    let info = weighted_crossprod(&design.x, &state.mu);
    let covariance = info.cholesky().map(|c| c.inverse());
    let std_errors = match &covariance {
        Some(cov) => DVector::from_iterator(p, (0..p).map(|j| cov[(j, j)].max(0.0).sqrt())),
        None => DVector::from_element(p, f64::NAN),
    };
    Ok(FitResult {
        columns: design.columns.clone(),
        sources: design.sources.clone(),
        coefficients: beta,
        std_errors,
        covariance,
        log_likelihood: state.log_likelihood,
        deviance: state.deviance,
        iterations,
        converged,
        gradient_norm: state.gradient_norm,
    })
}

struct Evaluation {
    mu: DVector<f64>,
    log_likelihood: f64,
    deviance: f64,
    gradient_norm: f64,
}

impl Evaluation {
    fn at(design: &DesignMatrix, beta: &DVector<f64>) -> Self {
        let eta = &design.x * beta + &design.offset;
        let mu = eta.map(f64::exp);
        let y = &design.response;
        let mut ll = 0.0;
        let mut dev = 0.0;
        for i in 0..mu.len() {
            let (yi, mi, ei) = (y[i], mu[i], eta[i]);
            ll += yi * ei - mi - ln_factorial(yi);
            dev += if yi > 0.0 { yi * (yi / mi).ln() - (yi - mi) } else { mi };
        }
        let score = design.x.tr_mul(&(y - &mu));
        let gradient_norm = score.amax();
        let ll = if ll.is_nan() { f64::NEG_INFINITY } else { ll };
        Self {
            mu,
            log_likelihood: ll,
            deviance: 2.0 * dev,
            gradient_norm: if gradient_norm.is_nan() {
                f64::INFINITY
            } else {
                gradient_norm
            },
        }
    }
}

/// Occurrence/exposure start for the intercept, zeros elsewhere.
fn initial_beta(design: &DesignMatrix) -> DVector<f64> {
    let mut beta = DVector::zeros(design.ncols());
    let intercept = design
        .columns
        .iter()
        .position(|c| c == INTERCEPT)
        .or_else(|| (0..design.ncols()).find(|&j| design.x.column(j).iter().all(|v| *v == 1.0)));
    if let Some(j) = intercept {
        let events: f64 = design.response.sum();
        let exposure: f64 = design.offset.iter().map(|o| o.exp()).sum();
        if events > 0.0 && exposure > 0.0 {
            beta[j] = (events / exposure).ln();
        }
    }
    beta
}

/// `X' diag(w) X`.
fn weighted_crossprod(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let sw = w.map(f64::sqrt);
    let mut xw = x.clone();
    for mut col in xw.column_iter_mut() {
        col.component_mul_assign(&sw);
    }
    xw.tr_mul(&xw)
}

/// Columns left over after a column-pivoted Householder QR finds the rank.
///
/// A pivot whose remaining column norm falls below `tol` times the largest
/// initial column norm marks every not-yet-chosen column as dependent.
pub fn dependent_columns(x: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let (n, p) = x.shape();
    let mut a = x.clone();
    let mut perm: Vec<usize> = (0..p).collect();
    let mut norms: Vec<f64> = (0..p).map(|j| a.column(j).norm_squared()).collect();
    let scale = norms.iter().cloned().fold(0.0_f64, f64::max).sqrt();
    if scale == 0.0 {
        return perm;
    }
    for k in 0..p.min(n) {
        let (best, _) =
            norms[k..].iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            );
        let best = best + k;
        if best != k {
            a.swap_columns(k, best);
            norms.swap(k, best);
            perm.swap(k, best);
        }
        // recompute exactly to avoid downdating drift
        let col_norm = a.view((k, k), (n - k, 1)).norm();
        if col_norm <= tol * scale {
            let mut dep = perm[k..].to_vec();
            dep.sort_unstable();
            return dep;
        }
        let alpha = if a[(k, k)] > 0.0 { -col_norm } else { col_norm };
        let mut v: DVector<f64> = a.view((k, k), (n - k, 1)).column(0).into_owned();
        v[0] -= alpha;
        let vnorm2 = v.norm_squared();
        if vnorm2 > 0.0 {
            for j in k..p {
                let mut col = a.view_mut((k, j), (n - k, 1));
                let dot = v.dot(&col.column(0));
                col.column_mut(0).axpy(-2.0 * dot / vnorm2, &v, 1.0);
            }
        }
        for j in (k + 1)..p {
            norms[j] = a.view((k + 1, j), (n - k - 1, 1)).norm_squared();
        }
    }
    if p > n {
        let mut dep = perm[n..].to_vec();
        dep.sort_unstable();
        return dep;
    }
    Vec::new()
}

/// Log-likelihood gained by the columns derived from `covariate`, given all
/// other columns: `l(full) - l(full without covariate)`.
pub fn likelihood_contribution(design: &DesignMatrix, covariate: &str) -> Result<f64> {
    let reduced = design.drop_source(covariate)?;
    let design = design.without_zero_columns()?;
    if design.drop_source(covariate).is_err() {
        // every column of the covariate is identically zero
        return Ok(0.0);
    }
    let full = fit_poisson(&design)?;
    let reduced = fit_poisson(&reduced.without_zero_columns()?)?;
    // nested MLEs: any negative difference is roundoff
    Ok((full.log_likelihood - reduced.log_likelihood).max(0.0))
}
