//! Generator matrices, one-year transition probabilities via the matrix
//! exponential, multi-year probabilities via Chapman-Kolmogorov products,
//! and competing-risks simulation.

mod expm;
mod simulate;

use nalgebra::{DMatrix, DVector};

pub use expm::{expm, one_norm};
pub use simulate::{individual_seed, rng_for, simulate_trajectory};

use crate::error::{Error, Result};
use crate::model::{RateQuery, TransitionRates, TransitionSpec};

/// Largest generator 1-norm accepted by [`one_year_probs`].
pub const MAX_GENERATOR_NORM: f64 = 1e6;

/// Intensity matrix at one integer age; rows sum to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    pub q: DMatrix<f64>,
    pub age: u32,
}

/// Transition probabilities between two integer ages.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    pub p: DMatrix<f64>,
    pub from_age: u32,
    pub to_age: u32,
}

/// Places `rates[m]` at `(from(m), to(m))` and balances the diagonal.
pub fn generator_from_rates(spec: &TransitionSpec, rates: &[f64], age: u32) -> GeneratorMatrix {
    let n = spec.n_states();
    let mut q = DMatrix::zeros(n, n);
    for (m, &(from, to)) in spec.transitions().iter().enumerate() {
        q[(from, to)] = rates[m];
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| q[(i, j)]).sum();
        q[(i, i)] = -off;
    }
    GeneratorMatrix { q, age }
}

pub fn build_generator<M: TransitionRates + ?Sized>(
    model: &M,
    query: &RateQuery<'_>,
    age: u32,
) -> Result<GeneratorMatrix> {
    let rates = model.rates_at(query, age)?;
    if let Some(bad) = rates.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(Error::Numerical(format!("invalid intensity {bad} at age {age}")));
    }
    Ok(generator_from_rates(model.transitions(), &rates, age))
}

/// `exp(Q)` over one year, cleaned so rows are probability vectors.
pub fn one_year_probs(generator: &GeneratorMatrix) -> Result<ProbabilityMatrix> {
    let q = &generator.q;
    let norm = one_norm(q);
    if !norm.is_finite() || norm > MAX_GENERATOR_NORM {
        return Err(Error::NumericalOverflow { norm });
    }
    let mut p = expm(q).ok_or_else(|| Error::Numerical("singular Padé denominator".into()))?;
    let n = p.nrows();
    for i in 0..n {
        if (0..n).all(|j| q[(i, j)] == 0.0) {
            // absorbing: exact unit row
            for j in 0..n {
                p[(i, j)] = f64::from(u8::from(i == j));
            }
            continue;
        }
        for j in 0..n {
            if p[(i, j)] < 0.0 {
                p[(i, j)] = 0.0;
            }
        }
        let sum: f64 = p.row(i).sum();
        if (sum - 1.0).abs() > 1e-12 {
            for j in 0..n {
                p[(i, j)] /= sum;
            }
        }
    }
    Ok(ProbabilityMatrix {
        p,
        from_age: generator.age,
        to_age: generator.age + 1,
    })
}

/// `P(x0, x0+1) P(x0+1, x0+2) ... P(x1-1, x1)`; identity when `x0 == x1`.
pub fn multi_year_probs<M: TransitionRates + ?Sized>(
    model: &M,
    query: &RateQuery<'_>,
    from_age: u32,
    to_age: u32,
) -> Result<ProbabilityMatrix> {
    if from_age > to_age {
        return Err(Error::invalid(format!("from age {from_age} after to age {to_age}")));
    }
    let n = model.transitions().n_states();
    let mut p = DMatrix::identity(n, n);
    for age in from_age..to_age {
        let step = one_year_probs(&build_generator(model, query, age)?)?;
        p *= step.p;
    }
    Ok(ProbabilityMatrix { p, from_age, to_age })
}

/// State distribution at each integer age `from_age..=to_age`, starting
/// with certainty in `initial_state`.
pub fn state_occupancy<M: TransitionRates + ?Sized>(
    model: &M,
    query: &RateQuery<'_>,
    initial_state: usize,
    from_age: u32,
    to_age: u32,
) -> Result<Vec<DVector<f64>>> {
    if from_age > to_age {
        return Err(Error::invalid(format!("from age {from_age} after to age {to_age}")));
    }
    let n = model.transitions().n_states();
    let mut dist = DVector::zeros(n);
    dist[initial_state] = 1.0;
    let mut out = Vec::with_capacity((to_age - from_age + 1) as usize);
    out.push(dist.clone());
    for age in from_age..to_age {
        let step = one_year_probs(&build_generator(model, query, age)?)?;
        dist = step.p.tr_mul(&dist);
        out.push(dist.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{constant_rates, Covariates, FnRates};

    fn query(c: &Covariates) -> RateQuery<'_> {
        RateQuery::new(c, None)
    }

    #[test]
    fn single_transition_generator() {
        let spec = TransitionSpec::two_state();
        let g = generator_from_rates(&spec, &[0.1], 60);
        assert_eq!(g.q, DMatrix::from_row_slice(2, 2, &[-0.1, 0.1, 0.0, 0.0]));
    }

    #[test]
    fn three_state_rows() {
        let spec = TransitionSpec::healthy_disabled_dead();
        let g = generator_from_rates(&spec, &[0.1, 0.2, 0.03, 0.4], 60);
        assert_eq!(g.q.row(0).iter().copied().collect::<Vec<_>>(), vec![-0.13, 0.1, 0.03]);
        assert_eq!(g.q.row(2).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 0.0]);
        for i in 0..3 {
            assert!(g.q.row(i).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn zero_generator_gives_identity() {
        let spec = TransitionSpec::healthy_disabled_dead();
        let p = one_year_probs(&generator_from_rates(&spec, &[0.0; 4], 50)).unwrap();
        assert_eq!(p.p, DMatrix::identity(3, 3));
    }

    #[test]
    fn two_state_closed_form() {
        let spec = TransitionSpec::two_state();
        let p = one_year_probs(&generator_from_rates(&spec, &[0.1], 50)).unwrap();
        assert!((p.p[(0, 1)] - (1.0 - (-0.1f64).exp())).abs() < 1e-12);
        assert!((p.p[(0, 1)] - 0.0951625819640404).abs() < 1e-12);
        assert_eq!(p.p.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0]);
    }

    #[test]
    fn overflow_guard() {
        let spec = TransitionSpec::two_state();
        let err = one_year_probs(&generator_from_rates(&spec, &[2e6], 50)).unwrap_err();
        assert!(matches!(err, Error::NumericalOverflow { .. }));
    }

    #[test]
    fn identity_over_empty_horizon() {
        let m = constant_rates(TransitionSpec::healthy_disabled_dead(), vec![0.1, 0.2, 0.03, 0.3]);
        let c = Covariates::default();
        let p = multi_year_probs(&m, &query(&c), 70, 70).unwrap();
        assert_eq!(p.p, DMatrix::identity(3, 3));
    }

    #[test]
    fn age_varying_survival_product() {
        let m = FnRates::new(TransitionSpec::two_state(), |_, age| 0.001 * f64::from(age - 40));
        let c = Covariates::default();
        let p = multi_year_probs(&m, &query(&c), 50, 60).unwrap();
        let cum: f64 = (50..60).map(|a| 0.001 * f64::from(a - 40)).sum();
        assert!((p.p[(0, 1)] - (1.0 - (-cum).exp())).abs() < 1e-12);
    }

    #[test]
    fn occupancy_matches_matrix_product() {
        let m = FnRates::new(TransitionSpec::healthy_disabled_dead(), |k, age| {
            [0.02, 0.3, 0.01, 0.08][k] * (0.05 * f64::from(age - 60)).exp()
        });
        let c = Covariates::default();
        let occ = state_occupancy(&m, &query(&c), 0, 60, 75).unwrap();
        let p = multi_year_probs(&m, &query(&c), 60, 75).unwrap();
        for j in 0..3 {
            assert!((occ[15][j] - p.p[(0, j)]).abs() < 1e-14);
        }
    }
}
