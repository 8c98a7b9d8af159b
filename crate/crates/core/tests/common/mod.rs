#![allow(dead_code)]

use msfair::glm::{AgeTerm, Formula};
use msfair::model::{ExposureRow, Policy, TransitionSpec};
use msfair::pipeline::{exposure_rows, merge_covariates, partition_by_transition};
use msfair::synthetic::{generate_population, generate_study, ScenarioSpec};

pub struct Study {
    pub spec: TransitionSpec,
    pub policies: Vec<Policy>,
    pub datasets: Vec<Vec<ExposureRow>>,
}

pub fn study(scenario: &ScenarioSpec) -> Study {
    let spec = TransitionSpec::healthy_disabled_dead();
    let policies = generate_population(scenario).unwrap();
    let trajectories = generate_study(scenario, &spec, &policies).unwrap();
    let rows = exposure_rows(&trajectories, &spec).unwrap();
    let merged = merge_covariates(rows, &policies);
    assert_eq!(merged.dropped_rows, 0);
    let datasets = partition_by_transition(merged.rows, spec.n_transitions());
    Study {
        spec,
        policies,
        datasets,
    }
}

pub fn formula(sensitive: bool) -> Formula {
    Formula::new(&["x1", "x2", "smoker"], AgeTerm::Linear, sensitive)
}

/// The same insureds issued at a common age.
pub fn issued_at(policies: &[Policy], age: f64) -> Vec<Policy> {
    policies
        .iter()
        .map(|p| Policy {
            issue_age: age,
            ..p.clone()
        })
        .collect()
}
