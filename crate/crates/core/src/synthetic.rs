//! Synthetic insured populations and study histories with a configurable
//! proxy-discrimination structure.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::glm::{Encoding, GlmRateModel, Term};
use crate::model::{Covariates, Policy, Sojourn, Terminal, Trajectory, TransitionRates, TransitionSpec};
use crate::multistate::{rng_for, simulate_trajectory};

const POPULATION_STREAM: u64 = 0x706f_7075_6c61_7469;
const STUDY_STREAM: u64 = 0x7374_7564_7900_0000;

/// How study histories are observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CensoringMode {
    /// Transition times observed exactly.
    Exact,
    /// States seen only at waves two years apart; a change of living state
    /// is placed at the midpoint of its interval, deaths keep exact dates.
    BiennialMidpoint,
}

impl fmt::Display for CensoringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CensoringMode::Exact => "exact",
            CensoringMode::BiennialMidpoint => "biennial_midpoint",
        })
    }
}

impl FromStr for CensoringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "exact" => Ok(CensoringMode::Exact),
            "biennial_midpoint" => Ok(CensoringMode::BiennialMidpoint),
            other => Err(Error::invalid(format!("unknown censoring mode `{other}`"))),
        }
    }
}

/// One generated covariate. Parameters are given per sensitive level, in
/// the order of [`ScenarioSpec::sensitive_levels`].
#[derive(Debug, Clone, PartialEq)]
pub enum CovariateGenerator {
    Normal {
        name: String,
        means: Vec<f64>,
        sd: f64,
    },
    /// `exp` of a normal with the given per-level means and sd.
    LogNormal {
        name: String,
        means: Vec<f64>,
        sd: f64,
    },
    Categorical {
        name: String,
        levels: Vec<String>,
        probs: Vec<Vec<f64>>,
    },
}

impl CovariateGenerator {
    pub fn name(&self) -> &str {
        match self {
            CovariateGenerator::Normal { name, .. }
            | CovariateGenerator::LogNormal { name, .. }
            | CovariateGenerator::Categorical { name, .. } => name,
        }
    }

    fn term(&self) -> Term {
        match self {
            CovariateGenerator::Normal { name, .. } | CovariateGenerator::LogNormal { name, .. } => {
                Term::Real { name: name.clone() }
            }
            CovariateGenerator::Categorical { name, levels, .. } => {
                let mut sorted = levels.clone();
                sorted.sort();
                Term::Categorical {
                    name: name.clone(),
                    levels: sorted,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub n: usize,
    pub sensitive_levels: Vec<String>,
    pub sensitive_probs: Vec<f64>,
    pub covariates: Vec<CovariateGenerator>,
    /// Whether the true intensities depend on the sensitive attribute
    /// directly, not only through covariates.
    pub direct_sensitive: bool,
    /// Per transition, ordered as [`ScenarioSpec::encoding`]'s columns.
    pub coefficients: Vec<Vec<f64>>,
    /// Issue ages are uniform on this interval.
    pub issue_age: (f64, f64),
    pub study_years: f64,
    pub initial_state: String,
    pub censoring: CensoringMode,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Healthy/disabled/dead with three sensitive groups. `x1` has a mean
    /// shifted by group and so proxies the sensitive attribute; `x2` and
    /// `smoker` do not. The direct sensitive effect has the same sign as
    /// the `x1` effect in every transition.
    pub fn proxied(n: usize, seed: u64) -> Self {
        Self {
            n,
            sensitive_levels: vec!["A".into(), "B".into(), "C".into()],
            sensitive_probs: vec![0.6, 0.25, 0.15],
            covariates: vec![
                CovariateGenerator::Normal {
                    name: "x1".into(),
                    means: vec![0.0, 1.0, 0.5],
                    sd: 1.0,
                },
                CovariateGenerator::Normal {
                    name: "x2".into(),
                    means: vec![0.0, 0.0, 0.0],
                    sd: 1.0,
                },
                CovariateGenerator::Categorical {
                    name: "smoker".into(),
                    levels: vec!["no".into(), "yes".into()],
                    probs: vec![vec![0.8, 0.2]; 3],
                },
            ],
            direct_sensitive: true,
            // (Intercept), age, x1, x2, smoker[yes], sensitive[B], sensitive[C]
            coefficients: vec![
                vec![-8.7, 0.08, 0.3, -0.2, 0.4, 0.3, 0.15],
                vec![0.05, -0.03, -0.2, 0.1, -0.2, -0.2, -0.1],
                vec![-10.05, 0.09, 0.25, 0.1, 0.5, 0.2, 0.1],
                vec![-6.2, 0.06, 0.2, 0.05, 0.3, 0.2, 0.1],
            ],
            issue_age: (50.0, 80.0),
            study_years: 20.0,
            initial_state: "Healthy".into(),
            censoring: CensoringMode::Exact,
            seed,
        }
    }

    /// Like [`ScenarioSpec::proxied`] without the direct sensitive effect.
    pub fn covariates_only(n: usize, seed: u64) -> Self {
        let mut s = Self::proxied(n, seed);
        s.direct_sensitive = false;
        for c in &mut s.coefficients {
            c.truncate(5);
        }
        s
    }

    /// The encoding the true coefficients refer to: intercept, linear age,
    /// the covariates in order, then the sensitive attribute if direct.
    pub fn encoding(&self) -> Encoding {
        let mut terms = vec![Term::Intercept, Term::Age];
        terms.extend(self.covariates.iter().map(CovariateGenerator::term));
        if self.direct_sensitive {
            let mut levels = self.sensitive_levels.clone();
            levels.sort();
            terms.push(Term::Sensitive { levels });
        }
        Encoding::from_terms(terms)
    }

    pub fn validate(&self, transitions: &TransitionSpec) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("population size n must be at least 1"));
        }
        check_probs("sensitive_probs", &self.sensitive_probs, self.sensitive_levels.len())?;
        let k = self.sensitive_levels.len();
        for c in &self.covariates {
            match c {
                CovariateGenerator::Normal { name, means, sd } | CovariateGenerator::LogNormal { name, means, sd } => {
                    if means.len() != k {
                        return Err(Error::invalid(format!("covariate `{name}` needs {k} means")));
                    }
                    if !(sd.is_finite() && *sd >= 0.0) || means.iter().any(|m| !m.is_finite()) {
                        return Err(Error::invalid(format!("covariate `{name}` has invalid parameters")));
                    }
                }
                CovariateGenerator::Categorical { name, levels, probs } => {
                    if levels.len() < 2 || probs.len() != k {
                        return Err(Error::invalid(format!(
                            "covariate `{name}` needs at least two levels and {k} distributions"
                        )));
                    }
                    for p in probs {
                        check_probs(name, p, levels.len())?;
                    }
                }
            }
        }
        if self.coefficients.len() != transitions.n_transitions() {
            return Err(Error::invalid(format!(
                "{} coefficient vectors for {} transitions",
                self.coefficients.len(),
                transitions.n_transitions()
            )));
        }
        let width = self.encoding().width();
        if let Some(c) = self.coefficients.iter().find(|c| c.len() != width) {
            return Err(Error::invalid(format!(
                "coefficient vector of length {} for {width} columns",
                c.len()
            )));
        }
        let (lo, hi) = self.issue_age;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(Error::invalid("issue-age interval is invalid"));
        }
        if !(self.study_years.is_finite() && self.study_years > 0.0) {
            return Err(Error::invalid("study_years must be positive"));
        }
        let init = transitions.state_index(&self.initial_state)?;
        if transitions.is_absorbing(init) {
            return Err(Error::invalid("initial state is absorbing"));
        }
        Ok(())
    }

    /// The generating intensity model.
    pub fn true_model(&self, transitions: &TransitionSpec) -> Result<GlmRateModel> {
        self.validate(transitions)?;
        let encoding = self.encoding();
        GlmRateModel::from_coefficients(
            transitions,
            vec![encoding; transitions.n_transitions()],
            self.coefficients
                .iter()
                .map(|c| DVector::from_column_slice(c))
                .collect(),
        )
    }
}

fn check_probs(what: &str, probs: &[f64], n: usize) -> Result<()> {
    if probs.len() != n || n == 0 {
        return Err(Error::invalid(format!("{what}: need {n} probabilities")));
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "{what}: probabilities must be nonnegative and sum to 1"
        )));
    }
    Ok(())
}

fn draw_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// `n` policies with ids `1..=n`; each policy draws from its own stream.
pub fn generate_population(spec: &ScenarioSpec) -> Result<Vec<Policy>> {
    if spec.n == 0 {
        return Err(Error::invalid("population size n must be at least 1"));
    }
    check_probs("sensitive_probs", &spec.sensitive_probs, spec.sensitive_levels.len())?;
    (1..=spec.n)
        .into_par_iter()
        .map(|i| {
            let id = i.to_string();
            let mut rng = rng_for(spec.seed ^ POPULATION_STREAM, &id);
            let s = draw_index(&spec.sensitive_probs, &mut rng);
            let mut cov = Covariates::default();
            for g in &spec.covariates {
                match g {
                    CovariateGenerator::Normal { name, means, sd } => {
                        let d = Normal::new(means[s], *sd).map_err(|e| Error::invalid(format!("{name}: {e}")))?;
                        cov = cov.with_real(name, d.sample(&mut rng));
                    }
                    CovariateGenerator::LogNormal { name, means, sd } => {
                        let d = Normal::new(means[s], *sd).map_err(|e| Error::invalid(format!("{name}: {e}")))?;
                        cov = cov.with_real(name, d.sample(&mut rng).exp());
                    }
                    CovariateGenerator::Categorical { name, levels, probs } => {
                        cov = cov.with_level(name, &levels[draw_index(&probs[s], &mut rng)]);
                    }
                }
            }
            let (lo, hi) = spec.issue_age;
            let age = if hi > lo { rng.random_range(lo..hi) } else { lo };
            Policy::new(&id, cov, age, &spec.sensitive_levels[s])
        })
        .collect()
}

/// Study histories for `policies` under the scenario's true model, from
/// issue to `study_years` later.
pub fn generate_study(
    spec: &ScenarioSpec,
    transitions: &TransitionSpec,
    policies: &[Policy],
) -> Result<Vec<Trajectory>> {
    let model = spec.true_model(transitions)?;
    simulate_study(
        &model,
        policies,
        &spec.initial_state,
        spec.study_years,
        spec.censoring,
        spec.seed,
    )
}

/// Simulates and observes one history per policy under any rate model.
pub fn simulate_study<M: TransitionRates + ?Sized>(
    model: &M,
    policies: &[Policy],
    initial_state: &str,
    study_years: f64,
    censoring: CensoringMode,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let spec = model.transitions();
    let start = spec.state_index(initial_state)?;
    let with_s = model.uses_sensitive();
    policies
        .par_iter()
        .map(|p| {
            let mut rng = rng_for(seed ^ STUDY_STREAM, &p.individual_id);
            let end = p.issue_age + study_years;
            let truth = simulate_trajectory(
                model,
                &p.query(with_s),
                &p.individual_id,
                start,
                p.issue_age,
                end,
                &mut rng,
            )?;
            match censoring {
                CensoringMode::Exact => Ok(truth),
                CensoringMode::BiennialMidpoint => observe_biennial(&truth, spec, 2.0),
            }
        })
        .collect()
}

/// State occupied at exact age `t` (the state entered last at or before `t`).
fn state_at(traj: &Trajectory, t: f64) -> &str {
    traj.sojourns
        .iter()
        .rev()
        .find(|s| s.start_age <= t)
        .map_or(traj.sojourns[0].state.as_str(), |s| s.state.as_str())
}

/// Re-observes an exactly known history at waves `interval` years apart
/// from its start. Between consecutive waves only the net change of living
/// state is seen and dated at the midpoint; a death keeps its exact date
/// and is recorded from the state seen at the preceding wave.
pub fn observe_biennial(truth: &Trajectory, spec: &TransitionSpec, interval: f64) -> Result<Trajectory> {
    let start = truth.sojourns[0].start_age;
    let last = truth.sojourns.last().unwrap();
    let end = last.end_age;
    let death_age = matches!(truth.terminal, Terminal::State(_)).then_some(end);

    let mut sojourns = Vec::new();
    let mut current = truth.sojourns[0].state.clone();
    let mut entered = start;
    let mut wave = start;
    loop {
        let next = wave + interval;
        if let Some(d) = death_age {
            if d <= next {
                sojourns.push(Sojourn {
                    state: current,
                    start_age: entered,
                    end_age: d,
                });
                let out = Trajectory {
                    individual_id: truth.individual_id.clone(),
                    sojourns,
                    terminal: truth.terminal.clone(),
                };
                out.validate(spec)?;
                return Ok(out);
            }
        }
        let at = next.min(end);
        let seen = state_at(truth, at).to_string();
        if seen != current {
            let mid = 0.5 * (wave + at);
            sojourns.push(Sojourn {
                state: std::mem::replace(&mut current, seen),
                start_age: entered,
                end_age: mid,
            });
            entered = mid;
        }
        if at >= end {
            sojourns.push(Sojourn {
                state: current,
                start_age: entered,
                end_age: end,
            });
            let out = Trajectory {
                individual_id: truth.individual_id.clone(),
                sojourns,
                terminal: Terminal::Censored,
            };
            out.validate(spec)?;
            return Ok(out);
        }
        wave = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(parts: &[(&str, f64, f64)], terminal: Terminal) -> Trajectory {
        Trajectory {
            individual_id: "1".into(),
            sojourns: parts
                .iter()
                .map(|&(s, a, b)| Sojourn {
                    state: s.into(),
                    start_age: a,
                    end_age: b,
                })
                .collect(),
            terminal,
        }
    }

    #[test]
    fn midpoint_of_interval() {
        let spec = TransitionSpec::healthy_disabled_dead();
        let t = traj(&[("Healthy", 60.0, 63.1), ("Disabled", 63.1, 70.0)], Terminal::Censored);
        let o = observe_biennial(&t, &spec, 2.0).unwrap();
        assert_eq!(o.sojourns[0].end_age, 63.0);
        assert_eq!(o.sojourns[1].start_age, 63.0);
        assert_eq!(o.sojourns[1].end_age, 70.0);
    }

    #[test]
    fn round_trip_within_interval_is_lost() {
        let spec = TransitionSpec::healthy_disabled_dead();
        let t = traj(
            &[
                ("Healthy", 60.0, 62.5),
                ("Disabled", 62.5, 63.0),
                ("Healthy", 63.0, 66.0),
            ],
            Terminal::Censored,
        );
        let o = observe_biennial(&t, &spec, 2.0).unwrap();
        assert_eq!(o.sojourns.len(), 1);
        assert_eq!(o.sojourns[0].state, "Healthy");
    }

    #[test]
    fn death_date_exact() {
        let spec = TransitionSpec::healthy_disabled_dead();
        let dead = Terminal::State("Dead".into());
        let t = traj(&[("Healthy", 60.0, 61.0), ("Disabled", 61.0, 64.7)], dead.clone());
        let o = observe_biennial(&t, &spec, 2.0).unwrap();
        assert_eq!(o.terminal, dead);
        assert_eq!(o.sojourns.last().unwrap().end_age, 64.7);
        assert_eq!(o.sojourns[0].end_age, 61.0);
    }

    #[test]
    fn population_is_deterministic_and_valid() {
        let spec = ScenarioSpec::proxied(200, 42);
        let a = generate_population(&spec).unwrap();
        let b = generate_population(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        assert!(a.iter().all(|p| (50.0..80.0).contains(&p.issue_age)));
        let transitions = TransitionSpec::healthy_disabled_dead();
        let study = generate_study(&spec, &transitions, &a).unwrap();
        for t in &study {
            t.validate(&transitions).unwrap();
        }
        assert_eq!(study, generate_study(&spec, &transitions, &a).unwrap());
    }

    #[test]
    fn encoding_layout() {
        let spec = ScenarioSpec::proxied(1, 0);
        assert_eq!(
            spec.encoding().columns(),
            [
                "(Intercept)",
                "age",
                "x1",
                "x2",
                "smoker[yes]",
                "sensitive[B]",
                "sensitive[C]"
            ]
        );
        assert_eq!(ScenarioSpec::covariates_only(1, 0).encoding().width(), 5);
    }

    #[test]
    fn invalid_scenarios() {
        let t = TransitionSpec::healthy_disabled_dead();
        let mut s = ScenarioSpec::proxied(0, 1);
        assert!(s.validate(&t).is_err());
        s.n = 5;
        s.sensitive_probs = vec![0.5, 0.5, 0.5];
        assert!(s.validate(&t).is_err());
        let mut s = ScenarioSpec::proxied(5, 1);
        s.coefficients[0].pop();
        assert!(s.validate(&t).is_err());
    }
}
