use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::glm::encoding::{Encoding, Formula};
use crate::glm::irls::{fit_poisson_with, likelihood_contribution, DesignMatrix, FitResult, IrlsConfig};
use crate::model::{ExposureRow, RateQuery, TransitionRates, TransitionSpec};

/// Log-linear intensities, one Poisson GLM per transition:
/// `ln lambda_m(z, x[, s]) = b_m . encode(z, x[, s])`.
#[derive(Debug, Clone)]
pub struct GlmRateModel {
    spec: TransitionSpec,
    encodings: Vec<Encoding>,
    coefficients: Vec<DVector<f64>>,
    fits: Vec<Option<FitResult>>,
}

impl GlmRateModel {
    /// Fits one regression per transition dataset, in parallel.
    pub fn fit(spec: &TransitionSpec, datasets: &[Vec<ExposureRow>], formula: &Formula) -> Result<Self> {
        Self::fit_with(spec, datasets, formula, &IrlsConfig::default())
    }

    pub fn fit_with(
        spec: &TransitionSpec,
        datasets: &[Vec<ExposureRow>],
        formula: &Formula,
        config: &IrlsConfig,
    ) -> Result<Self> {
        if datasets.len() != spec.n_transitions() {
            return Err(Error::invalid(format!(
                "{} datasets for {} transitions",
                datasets.len(),
                spec.n_transitions()
            )));
        }
        let fitted: Vec<(Encoding, FitResult)> = datasets
            .par_iter()
            .enumerate()
            .map(|(m, rows)| {
                let run = || -> Result<(Encoding, FitResult)> {
                    let encoding = Encoding::fit(formula, rows)?;
                    let design = DesignMatrix::from_rows(rows, &encoding)?;
                    Ok((encoding, fit_poisson_with(&design, config)?))
                };
                run().map_err(|e| Error::InTransition {
                    transition: spec.transition_name(m),
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;
        let (encodings, fits): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
        Ok(Self {
            spec: spec.clone(),
            encodings,
            coefficients: fits.iter().map(|f| f.coefficients.clone()).collect(),
            fits: fits.into_iter().map(Some).collect(),
        })
    }

    /// A model with known coefficients (one vector per transition, ordered
    /// as the encoding's columns).
    pub fn from_coefficients(
        spec: &TransitionSpec,
        encodings: Vec<Encoding>,
        coefficients: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if encodings.len() != spec.n_transitions() || coefficients.len() != spec.n_transitions() {
            return Err(Error::invalid(
                "need one encoding and coefficient vector per transition",
            ));
        }
        for (e, c) in encodings.iter().zip(&coefficients) {
            if e.width() != c.len() {
                return Err(Error::invalid(format!(
                    "coefficient vector of length {} for {} columns",
                    c.len(),
                    e.width()
                )));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            fits: vec![None; encodings.len()],
            encodings,
            coefficients,
        })
    }

    pub fn encoding(&self, m: usize) -> &Encoding {
        &self.encodings[m]
    }

    pub fn coefficients(&self, m: usize) -> &DVector<f64> {
        &self.coefficients[m]
    }

    pub fn fit_result(&self, m: usize) -> Option<&FitResult> {
        self.fits[m].as_ref()
    }

    pub fn linear_predictor(&self, m: usize, query: &RateQuery<'_>, age: u32) -> Result<f64> {
        let x = self.encodings[m].encode(query, age)?;
        Ok(x.iter().zip(self.coefficients[m].iter()).map(|(a, b)| a * b).sum())
    }

    /// Log-likelihood drop from removing `covariate` in each
    /// transition, refitting on the given datasets.
    pub fn likelihood_contributions(&self, datasets: &[Vec<ExposureRow>], covariate: &str) -> Result<Vec<f64>> {
        datasets
            .par_iter()
            .enumerate()
            .map(|(m, rows)| {
                let design = DesignMatrix::from_rows(rows, &self.encodings[m])?;
                likelihood_contribution(&design, covariate)
            })
            .collect()
    }

    /// Plain-text model card: the encoding of every transition.
    pub fn card(&self) -> String {
        let mut s = String::from("# msfair model card\n");
        s.push_str(&format!("uses_sensitive = {}\n", self.uses_sensitive()));
        for (m, enc) in self.encodings.iter().enumerate() {
            s.push_str(&format!(
                "\n[transition {}]\nname = {}\n",
                m + 1,
                self.spec.transition_name(m)
            ));
            s.push_str(&enc.card());
        }
        s
    }
}

impl TransitionRates for GlmRateModel {
    fn transitions(&self) -> &TransitionSpec {
        &self.spec
    }

    fn rate(&self, m: usize, query: &RateQuery<'_>, age: u32) -> Result<f64> {
        predict_rate(self, m, query, age)
    }

    fn uses_sensitive(&self) -> bool {
        self.encodings.iter().any(Encoding::uses_sensitive)
    }

    fn sensitive_levels(&self, m: usize) -> Option<Vec<String>> {
        self.encodings[m].sensitive_levels().map(<[String]>::to_vec)
    }
}

/// `exp` of the linear predictor; errors if the result is not a finite
/// positive intensity.
pub fn predict_rate(model: &GlmRateModel, m: usize, query: &RateQuery<'_>, age: u32) -> Result<f64> {
    let rate = model.linear_predictor(m, query, age)?.exp();
    if !(rate.is_finite() && rate > 0.0) {
        return Err(Error::Numerical(format!(
            "intensity {rate} for {} at age {age}",
            model.spec.transition_name(m)
        )));
    }
    Ok(rate)
}
