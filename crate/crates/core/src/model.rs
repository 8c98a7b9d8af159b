//! Domain types shared across the crate: the state graph, observed
//! trajectories, insured policies, Poisson exposure rows, product
//! definitions, and the [`TransitionRates`] interface every fitted or
//! adjusted intensity model implements.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Default terminal age for rate tables and pricing sums.
pub const DEFAULT_TERMINAL_AGE: u32 = 110;

/// States and allowed transitions of a multi-state model.
///
/// Transitions are indexed `0..M` in declaration order; user-facing output
/// numbers them from 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionSpec {
    states: Vec<String>,
    transitions: Vec<(usize, usize)>,
}

impl TransitionSpec {
    /// Builds and validates a state graph from labels.
    pub fn new<S: AsRef<str>>(states: &[S], transitions: &[(S, S)]) -> Result<Self> {
        let states: Vec<String> = states.iter().map(|s| s.as_ref().to_string()).collect();
        let mut seen = HashSet::new();
        for s in &states {
            if !seen.insert(s.as_str()) {
                return Err(Error::DuplicateState(s.clone()));
            }
        }
        let index = |label: &str| {
            states
                .iter()
                .position(|s| s == label)
                .ok_or_else(|| Error::UnknownState(label.to_string()))
        };
        let mut pairs = Vec::with_capacity(transitions.len());
        for (from, to) in transitions {
            let (from, to) = (from.as_ref(), to.as_ref());
            if from == to {
                return Err(Error::SelfLoop(from.to_string()));
            }
            let pair = (index(from)?, index(to)?);
            if pairs.contains(&pair) {
                return Err(Error::DuplicateTransition {
                    from: from.to_string(),
                    to: to.to_string(),
                });
            }
            pairs.push(pair);
        }
        Ok(Self {
            states,
            transitions: pairs,
        })
    }

    /// Alive -> Dead.
    pub fn two_state() -> Self {
        Self::new(&["Alive", "Dead"], &[("Alive", "Dead")]).expect("valid preset")
    }

    /// Healthy/Disabled/Dead with recovery. Transition order:
    /// 1 Healthy->Disabled, 2 Disabled->Healthy, 3 Healthy->Dead, 4 Disabled->Dead.
    pub fn healthy_disabled_dead() -> Self {
        Self::new(
            &["Healthy", "Disabled", "Dead"],
            &[
                ("Healthy", "Disabled"),
                ("Disabled", "Healthy"),
                ("Healthy", "Dead"),
                ("Disabled", "Dead"),
            ],
        )
        .expect("valid preset")
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_transitions(&self) -> usize {
        self.transitions.len()
    }

    /// `(from, to)` state indices of transition `m`.
    pub fn transition(&self, m: usize) -> (usize, usize) {
        self.transitions[m]
    }

    pub fn transitions(&self) -> &[(usize, usize)] {
        &self.transitions
    }

    pub fn state_index(&self, label: &str) -> Result<usize> {
        self.states
            .iter()
            .position(|s| s == label)
            .ok_or_else(|| Error::UnknownState(label.to_string()))
    }

    pub fn state_label(&self, idx: usize) -> &str {
        &self.states[idx]
    }

    /// Index of the transition `from -> to`, if the graph allows it.
    pub fn find(&self, from: usize, to: usize) -> Option<usize> {
        self.transitions.iter().position(|&p| p == (from, to))
    }

    /// Transitions that can occur from `state`, in index order.
    pub fn live_from(&self, state: usize) -> impl Iterator<Item = usize> + '_ {
        self.transitions
            .iter()
            .enumerate()
            .filter(move |(_, (from, _))| *from == state)
            .map(|(m, _)| m)
    }

    pub fn is_absorbing(&self, state: usize) -> bool {
        self.live_from(state).next().is_none()
    }

    pub fn absorbing(&self) -> Vec<usize> {
        (0..self.states.len()).filter(|&s| self.is_absorbing(s)).collect()
    }

    /// Human-readable transition name, e.g. `Healthy->Disabled`.
    pub fn transition_name(&self, m: usize) -> String {
        let (f, t) = self.transitions[m];
        format!("{}->{}", self.states[f], self.states[t])
    }
}

/// Validates a state graph given as labels; see [`TransitionSpec::new`].
pub fn validate_transition_spec<S: AsRef<str>>(states: &[S], transitions: &[(S, S)]) -> Result<()> {
    TransitionSpec::new(states, transitions).map(|_| ())
}

/// One contiguous stay in a state.
#[derive(Debug, Clone, PartialEq)]
pub struct Sojourn {
    pub state: String,
    pub start_age: f64,
    pub end_age: f64,
}

/// How the last sojourn of a trajectory ends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Terminal {
    /// Observation stopped without a transition.
    Censored,
    /// A transition into this state at the end of the last sojourn, after
    /// which observation stops.
    State(String),
}

impl fmt::Display for Terminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Terminal::Censored => f.write_str("censored"),
            Terminal::State(s) => f.write_str(s),
        }
    }
}

/// Observed life history of one individual.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub individual_id: String,
    pub sojourns: Vec<Sojourn>,
    pub terminal: Terminal,
}

impl Trajectory {
    /// State entered at the end of sojourn `i`, if any.
    pub fn exit_state(&self, i: usize) -> Option<&str> {
        match self.sojourns.get(i + 1) {
            Some(next) => Some(&next.state),
            None => match &self.terminal {
                Terminal::Censored => None,
                Terminal::State(s) => Some(s),
            },
        }
    }

    /// Checks contiguity, positive sojourn lengths and transition legality.
    pub fn validate(&self, spec: &TransitionSpec) -> Result<()> {
        let bad = |reason: String| Error::InvalidTrajectory {
            id: self.individual_id.clone(),
            reason,
        };
        if self.sojourns.is_empty() {
            return Err(bad("no sojourns".into()));
        }
        for (i, s) in self.sojourns.iter().enumerate() {
            let from = spec.state_index(&s.state)?;
            if !(s.start_age.is_finite() && s.end_age.is_finite()) || s.start_age < 0.0 {
                return Err(bad(format!("sojourn {} has invalid ages", i + 1)));
            }
            if s.start_age >= s.end_age {
                return Err(bad(format!(
                    "sojourn {} has start {} >= end {}",
                    i + 1,
                    s.start_age,
                    s.end_age
                )));
            }
            if let Some(next) = self.sojourns.get(i + 1) {
                if next.start_age != s.end_age {
                    return Err(bad(format!("gap or overlap after sojourn {}", i + 1)));
                }
            }
            if let Some(to_label) = self.exit_state(i) {
                let to = spec.state_index(to_label)?;
                if spec.find(from, to).is_none() {
                    return Err(Error::IllegalTransition {
                        id: self.individual_id.clone(),
                        from: s.state.clone(),
                        to: to_label.to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// A covariate value before design-matrix encoding.
#[derive(Debug, Clone, PartialEq)]
pub enum CovariateValue {
    Real(f64),
    Level(String),
}

impl fmt::Display for CovariateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovariateValue::Real(v) => write!(f, "{v}"),
            CovariateValue::Level(l) => f.write_str(l),
        }
    }
}

/// Named static covariates of one insured, in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Covariates(Vec<(String, CovariateValue)>);

impl Covariates {
    pub fn new(values: Vec<(String, CovariateValue)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (name, _) in &values {
            if !seen.insert(name.as_str()) {
                return Err(Error::invalid(format!("duplicate covariate `{name}`")));
            }
        }
        Ok(Self(values))
    }

    /// Builder-style insert of a real value; replaces an existing entry.
    pub fn with_real(mut self, name: &str, value: f64) -> Self {
        self.set(name, CovariateValue::Real(value));
        self
    }

    pub fn with_level(mut self, name: &str, level: &str) -> Self {
        self.set(name, CovariateValue::Level(level.to_string()));
        self
    }

    pub fn set(&mut self, name: &str, value: CovariateValue) {
        match self.0.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = value,
            None => self.0.push((name.to_string(), value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&CovariateValue> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn real(&self, name: &str) -> Result<f64> {
        match self.get(name) {
            Some(CovariateValue::Real(v)) => Ok(*v),
            Some(CovariateValue::Level(_)) => Err(Error::CovariateKind {
                covariate: name.to_string(),
                expected: "real",
            }),
            None => Err(Error::MissingCovariate(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &CovariateValue)> {
        self.0.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One insured: static covariates, issue age and sensitive attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub individual_id: Arc<str>,
    pub covariates: Arc<Covariates>,
    pub issue_age: f64,
    pub sensitive: Arc<str>,
}

impl Policy {
    pub fn new(id: &str, covariates: Covariates, issue_age: f64, sensitive: &str) -> Result<Self> {
        if !(issue_age.is_finite() && issue_age >= 0.0) {
            return Err(Error::InvalidPolicy {
                id: id.to_string(),
                reason: format!("issue age {issue_age} must be finite and non-negative"),
            });
        }
        Ok(Self {
            individual_id: id.into(),
            covariates: Arc::new(covariates),
            issue_age,
            sensitive: sensitive.into(),
        })
    }

    /// The rate query this policy answers with, optionally hiding `s`.
    pub fn query(&self, with_sensitive: bool) -> RateQuery<'_> {
        RateQuery {
            covariates: &self.covariates,
            sensitive: with_sensitive.then_some(&*self.sensitive),
        }
    }
}

/// One Poisson observation: events of transition `m` during one integer
/// age year, with its time at risk.
///
/// A row exists only when the individual was at risk of `m` for positive
/// time at that age.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureRow {
    pub individual_id: Arc<str>,
    /// Zero-based transition index.
    pub transition: usize,
    /// Age last birthday.
    pub age: u32,
    pub event: u32,
    /// Years at risk within the age year, in (0, 1].
    pub exposure: f64,
    pub covariates: Arc<Covariates>,
    pub sensitive: Option<Arc<str>>,
}

/// Benefit amount per policy year.
#[derive(Debug, Clone, PartialEq)]
pub enum BenefitSchedule {
    Level(f64),
    /// Amount at duration `t`; zero beyond the end.
    ByDuration(Vec<f64>),
}

impl BenefitSchedule {
    pub fn amount(&self, t: usize) -> f64 {
        match self {
            BenefitSchedule::Level(b) => *b,
            BenefitSchedule::ByDuration(v) => v.get(t).copied().unwrap_or(0.0),
        }
    }
}

/// Cash-flow definition of a long-term product.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductSpec {
    pub premium_states: Vec<String>,
    pub benefit_states: Vec<String>,
    pub benefit: BenefitSchedule,
    /// Amount paid at the end of the year of death.
    pub death_benefit: Option<f64>,
    /// State that triggers the death benefit.
    pub death_state: String,
    pub discount: f64,
    pub terminal_age: u32,
    pub initial_state: String,
}

impl ProductSpec {
    /// Lump-sum LTC cover: $1 per year disabled, 3% interest, terminal age 110.
    pub fn ltci() -> Self {
        Self {
            premium_states: vec!["Healthy".into()],
            benefit_states: vec!["Disabled".into()],
            benefit: BenefitSchedule::Level(1.0),
            death_benefit: None,
            death_state: "Dead".into(),
            discount: 1.0 / 1.03,
            terminal_age: DEFAULT_TERMINAL_AGE,
            initial_state: "Healthy".into(),
        }
    }

    pub fn validate(&self, spec: &TransitionSpec) -> Result<()> {
        for s in self
            .premium_states
            .iter()
            .chain(&self.benefit_states)
            .chain(std::iter::once(&self.initial_state))
        {
            spec.state_index(s)?;
        }
        if self.death_benefit.is_some() {
            spec.state_index(&self.death_state)?;
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::invalid(format!(
                "discount factor {} outside (0, 1]",
                self.discount
            )));
        }
        if self.terminal_age == 0 {
            return Err(Error::invalid("terminal age must be positive"));
        }
        Ok(())
    }
}

/// Inputs to a rate prediction other than transition and age.
#[derive(Debug, Clone, Copy)]
pub struct RateQuery<'a> {
    pub covariates: &'a Covariates,
    pub sensitive: Option<&'a str>,
}

impl<'a> RateQuery<'a> {
    pub fn new(covariates: &'a Covariates, sensitive: Option<&'a str>) -> Self {
        Self { covariates, sensitive }
    }
}

/// A transition-intensity model: one predictor per transition, piecewise
/// constant in integer age.
pub trait TransitionRates: Sync {
    fn transitions(&self) -> &TransitionSpec;

    /// Intensity (per year) of transition `m` at age last birthday `age`.
    fn rate(&self, m: usize, query: &RateQuery<'_>, age: u32) -> Result<f64>;

    /// Whether predictions read the sensitive attribute.
    fn uses_sensitive(&self) -> bool;

    /// Sensitive levels transition `m` was fitted on, if it reads them.
    fn sensitive_levels(&self, _m: usize) -> Option<Vec<String>> {
        None
    }

    /// All transition intensities at one age.
    fn rates_at(&self, query: &RateQuery<'_>, age: u32) -> Result<Vec<f64>> {
        (0..self.transitions().n_transitions())
            .map(|m| self.rate(m, query, age))
            .collect()
    }
}

impl<T: TransitionRates + ?Sized> TransitionRates for &T {
    fn transitions(&self) -> &TransitionSpec {
        (**self).transitions()
    }

    fn rate(&self, m: usize, query: &RateQuery<'_>, age: u32) -> Result<f64> {
        (**self).rate(m, query, age)
    }

    fn uses_sensitive(&self) -> bool {
        (**self).uses_sensitive()
    }

    fn sensitive_levels(&self, m: usize) -> Option<Vec<String>> {
        (**self).sensitive_levels(m)
    }

    fn rates_at(&self, query: &RateQuery<'_>, age: u32) -> Result<Vec<f64>> {
        (**self).rates_at(query, age)
    }
}

/// Rates given directly as a function of transition and age; covariates
/// and the sensitive attribute are ignored.
pub struct FnRates<F> {
    spec: TransitionSpec,
    f: F,
}

impl<F> FnRates<F>
where
    F: Fn(usize, u32) -> f64 + Sync,
{
    pub fn new(spec: TransitionSpec, f: F) -> Self {
        Self { spec, f }
    }
}

impl<F> TransitionRates for FnRates<F>
where
    F: Fn(usize, u32) -> f64 + Sync,
{
    fn transitions(&self) -> &TransitionSpec {
        &self.spec
    }

    fn rate(&self, m: usize, _query: &RateQuery<'_>, age: u32) -> Result<f64> {
        Ok((self.f)(m, age))
    }

    fn uses_sensitive(&self) -> bool {
        false
    }
}

/// Age-independent intensities, one per transition.
pub fn constant_rates(spec: TransitionSpec, rates: Vec<f64>) -> FnRates<impl Fn(usize, u32) -> f64 + Sync> {
    FnRates::new(spec, move |m, _| rates[m])
}
