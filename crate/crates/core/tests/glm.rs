mod common;

use std::collections::BTreeMap;

use msfair::glm::{fit_poisson, likelihood_contribution, AgeTerm, DesignMatrix, Formula, GlmRateModel};
use msfair::model::{TransitionRates, TransitionSpec};
use msfair::synthetic::ScenarioSpec;
use msfair::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

fn random_design(seed: u64, n: usize) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    let offset = DVector::from_fn(n, |_, _| rng.random_range(0.5f64..3.0).ln());
    let beta = DVector::from_vec(vec![-0.5, 0.4, -0.3]);
    let mu = (&x * &beta + &offset).map(f64::exp);
    let y = mu.map(|m| Poisson::new(m).unwrap().sample(&mut rng));
    (x, y, offset)
}

fn names() -> Vec<String> {
    vec!["(Intercept)".into(), "a".into(), "b".into()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn exposure_scale_moves_only_the_intercept(seed in 0u64..1000, log_c in -3.0f64..3.0) {
        let (x, y, offset) = random_design(seed, 150);
        let base = fit_poisson(&DesignMatrix::new(names(), x.clone(), y.clone(), offset.clone()).unwrap()).unwrap();
        let shifted = offset.map(|o| o + log_c);
        let scaled = fit_poisson(&DesignMatrix::new(names(), x, y, shifted).unwrap()).unwrap();
        prop_assert!((scaled.coefficients[0] - (base.coefficients[0] - log_c)).abs() < 1e-8);
        for j in 1..3 {
            prop_assert!((scaled.coefficients[j] - base.coefficients[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn row_order_is_irrelevant(seed in 0u64..1000) {
        let (x, y, offset) = random_design(seed, 80);
        let n = x.nrows();
        let perm: Vec<usize> = (0..n).rev().collect();
        let a = fit_poisson(&DesignMatrix::new(names(), x.clone(), y.clone(), offset.clone()).unwrap()).unwrap();
        let b = fit_poisson(
            &DesignMatrix::new(
                names(),
                x.select_rows(&perm),
                DVector::from_fn(n, |i, _| y[perm[i]]),
                DVector::from_fn(n, |i, _| offset[perm[i]]),
            )
            .unwrap(),
        )
        .unwrap();
        prop_assert!((&a.coefficients - &b.coefficients).amax() < 1e-9);
    }

    #[test]
    fn contributions_are_nonnegative(seed in 0u64..1000) {
        let (x, y, offset) = random_design(seed, 120);
        let d = DesignMatrix::new(names(), x, y, offset).unwrap();
        for c in ["a", "b"] {
            prop_assert!(likelihood_contribution(&d, c).unwrap() >= 0.0);
        }
    }
}

#[test]
fn score_vanishes_at_the_fit() {
    let (x, y, offset) = random_design(9, 200);
    let d = DesignMatrix::new(names(), x.clone(), y.clone(), offset.clone()).unwrap();
    let fit = fit_poisson(&d).unwrap();
    let mu = (&x * &fit.coefficients + &offset).map(f64::exp);
    assert!((x.transpose() * (y - mu)).amax() < 1e-8);
    assert!(fit.converged);
}

#[test]
fn duplicated_column_is_collinear() {
    let (x, y, offset) = random_design(1, 60);
    let dup = x.column(1).clone_owned();
    let mut x = x.insert_column(3, 0.0);
    x.set_column(3, &dup);
    let mut cols = names();
    cols.push("a_again".into());
    let err = fit_poisson(&DesignMatrix::new(cols, x, y, offset).unwrap()).unwrap_err();
    assert!(matches!(err, Error::Collinear { .. }), "{err}");
}

#[test]
fn blind_fit_drops_sensitive_terms() {
    let s = common::study(&ScenarioSpec::proxied(3000, 5));
    let blind = GlmRateModel::fit(&s.spec, &s.datasets, &common::formula(false)).unwrap();
    let aware = GlmRateModel::fit(&s.spec, &s.datasets, &common::formula(true)).unwrap();
    assert!(!blind.uses_sensitive());
    assert!(aware.uses_sensitive());
    for m in 0..4 {
        assert!(blind.encoding(m).columns().iter().all(|c| !c.starts_with("sensitive")));
        assert_eq!(aware.sensitive_levels(m).unwrap(), ["A", "B", "C"]);
    }
    let contributions = aware.likelihood_contributions(&s.datasets, "sensitive").unwrap();
    assert!(contributions.iter().all(|c| *c >= 0.0));
}

#[test]
fn saturated_age_reproduces_occurrence_exposure() {
    let s = common::study(&ScenarioSpec::covariates_only(2000, 17));
    let mut cells = BTreeMap::<u32, (f64, f64)>::new();
    for r in &s.datasets[0] {
        let c = cells.entry(r.age).or_default();
        c.0 += r.event as f64;
        c.1 += r.exposure;
    }
    // A saturated design has no finite fit for an age cell without events.
    let rows: Vec<_> = s.datasets[0]
        .iter()
        .filter(|r| cells[&r.age].0 > 0.0)
        .cloned()
        .collect();
    let spec = TransitionSpec::new(&["Healthy", "Disabled"], &[("Healthy", "Disabled")]).unwrap();
    let formula = Formula::new(&[] as &[&str], AgeTerm::Factor, false);
    let model = GlmRateModel::fit(&spec, &[rows], &formula).unwrap();
    let q = s.policies[0].query(false);
    for (&age, &(d, e)) in cells.iter().filter(|(_, c)| c.0 > 0.0) {
        let rate = model.rate(0, &q, age).unwrap();
        // Convergence is on the score, so sparse cells carry error of order 1e-8 / d.
        assert!((rate / (d / e) - 1.0).abs() < 1e-7, "age {age}: {rate} vs {}", d / e);
    }
}
