//! Expected-present-value pricing on annual time steps.
//!
//! State probabilities come from [`state_occupancy`] at integer ages from
//! the issue age (age last birthday) to the product's terminal age; sums
//! stop at the terminal age. Lapses are ignored.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Policy, ProductSpec, RateQuery, TransitionRates};
use crate::multistate::state_occupancy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PricingMode {
    /// Rates fitted with the sensitive attribute, priced with it.
    BestEstimate,
    /// Rates fitted and priced without the sensitive attribute.
    Blind,
    /// Discrimination-free rates averaged over the sensitive attribute.
    FairnessAdjusted,
}

impl PricingMode {
    pub const ALL: [PricingMode; 3] = [
        PricingMode::BestEstimate,
        PricingMode::Blind,
        PricingMode::FairnessAdjusted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PricingMode::BestEstimate => "best_estimate",
            PricingMode::Blind => "blind",
            PricingMode::FairnessAdjusted => "fairness_adjusted",
        }
    }
}

impl fmt::Display for PricingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PricingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "best_estimate" | "best" => Ok(PricingMode::BestEstimate),
            "blind" => Ok(PricingMode::Blind),
            "fairness_adjusted" | "adjusted" => Ok(PricingMode::FairnessAdjusted),
            other => Err(Error::invalid(format!("unknown pricing mode `{other}`"))),
        }
    }
}

/// Age last birthday at issue.
pub fn issue_age_floor(issue_age: f64) -> u32 {
    issue_age.floor() as u32
}

/// Distribution over states at each policy duration `t = 0..=terminal - x`.
fn occupancy<M: TransitionRates + ?Sized>(
    model: &M,
    query: &RateQuery<'_>,
    issue_age: f64,
    product: &ProductSpec,
) -> Result<Vec<DVector<f64>>> {
    let spec = model.transitions();
    product.validate(spec)?;
    let x = issue_age_floor(issue_age);
    if x > product.terminal_age {
        return Err(Error::invalid(format!(
            "issue age {x} beyond terminal age {}",
            product.terminal_age
        )));
    }
    let initial = spec.state_index(&product.initial_state)?;
    state_occupancy(model, query, initial, x, product.terminal_age)
}

fn state_set(model_states: &[String], labels: &[String]) -> Vec<usize> {
    labels
        .iter()
        .filter_map(|l| model_states.iter().position(|s| s == l))
        .collect()
}

/// All EPVs of one policy under one model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Valuation {
    pub epv_benefits: f64,
    pub epv_premium_annuity: f64,
    pub epv_death_benefit: f64,
}

pub fn value<M: TransitionRates + ?Sized>(
    model: &M,
    query: &RateQuery<'_>,
    issue_age: f64,
    product: &ProductSpec,
) -> Result<Valuation> {
    let occ = occupancy(model, query, issue_age, product)?;
    let states = model.transitions().states();
    let premium = state_set(states, &product.premium_states);
    let benefit = state_set(states, &product.benefit_states);
    let v = product.discount;

    let mut annuity = 0.0;
    let mut benefits = 0.0;
    let mut disc = 1.0;
    for (t, dist) in occ.iter().enumerate() {
        annuity += disc * premium.iter().map(|&i| dist[i]).sum::<f64>();
        let b = product.benefit.amount(t);
        if b != 0.0 {
            benefits += disc * b * benefit.iter().map(|&i| dist[i]).sum::<f64>();
        }
        disc *= v;
    }

    let mut death = 0.0;
    if let Some(amount) = product.death_benefit {
        let dead = model.transitions().state_index(&product.death_state)?;
        let mut disc = v;
        for pair in occ.windows(2) {
            death += disc * (pair[1][dead] - pair[0][dead]);
            disc *= v;
        }
        death *= amount;
    }
    Ok(Valuation {
        epv_benefits: benefits,
        epv_premium_annuity: annuity,
        epv_death_benefit: death,
    })
}

/// `sum_t v^t Pr(J_{x+t} in premium states)`, per unit of level premium.
pub fn epv_premium_annuity<M: TransitionRates + ?Sized>(
    model: &M,
    query: &RateQuery<'_>,
    issue_age: f64,
    product: &ProductSpec,
) -> Result<f64> {
    value(model, query, issue_age, product).map(|v| v.epv_premium_annuity)
}

/// `sum_t v^t B_t Pr(J_{x+t} in benefit states)`.
pub fn epv_benefits<M: TransitionRates + ?Sized>(
    model: &M,
    query: &RateQuery<'_>,
    issue_age: f64,
    product: &ProductSpec,
) -> Result<f64> {
    value(model, query, issue_age, product).map(|v| v.epv_benefits)
}

/// Death benefit paid at the end of the year of death:
/// `amount * sum_t v^{t+1} [Pr(dead at t+1) - Pr(dead at t)]`.
pub fn epv_death_benefit<M: TransitionRates + ?Sized>(
    model: &M,
    query: &RateQuery<'_>,
    issue_age: f64,
    product: &ProductSpec,
) -> Result<f64> {
    if product.death_benefit.is_none() {
        return Err(Error::invalid("product has no death benefit"));
    }
    value(model, query, issue_age, product).map(|v| v.epv_death_benefit)
}

/// Single premium for $1 a year while disabled, issued healthy, with
/// `v = 1/1.03` and terminal age 110.
pub fn lump_sum_ltci<M: TransitionRates + ?Sized>(model: &M, query: &RateQuery<'_>, issue_age: f64) -> Result<f64> {
    epv_benefits(model, query, issue_age, &ProductSpec::ltci())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PremiumQuote {
    pub individual_id: Arc<str>,
    pub issue_age: u32,
    pub sensitive: Arc<str>,
    pub mode: PricingMode,
    pub epv_benefits: f64,
    pub epv_premium_annuity: f64,
    /// Single premium: EPV of benefits, plus the death benefit if any.
    pub lump_sum: f64,
    pub level_premium: Option<f64>,
}

/// The rate model behind each pricing mode.
#[derive(Clone, Copy, Default)]
pub struct PricingModels<'a> {
    pub best_estimate: Option<&'a dyn TransitionRates>,
    pub blind: Option<&'a dyn TransitionRates>,
    pub fairness_adjusted: Option<&'a dyn TransitionRates>,
}

impl<'a> PricingModels<'a> {
    fn get(&self, mode: PricingMode) -> Result<&'a dyn TransitionRates> {
        let model = match mode {
            PricingMode::BestEstimate => self.best_estimate,
            PricingMode::Blind => self.blind,
            PricingMode::FairnessAdjusted => self.fairness_adjusted,
        }
        .ok_or_else(|| Error::ModeModelMismatch(format!("no model supplied for {mode}")))?;
        match mode {
            PricingMode::BestEstimate if !model.uses_sensitive() => Err(Error::ModeModelMismatch(
                "best-estimate pricing needs a model fitted with the sensitive attribute".into(),
            )),
            PricingMode::Blind | PricingMode::FairnessAdjusted if model.uses_sensitive() => Err(
                Error::ModeModelMismatch(format!("{mode} pricing must not read the sensitive attribute")),
            ),
            _ => Ok(model),
        }
    }
}

/// One quote per requested mode. Only best-estimate pricing passes the
/// sensitive attribute to its model.
pub fn quote(
    policy: &Policy,
    models: &PricingModels<'_>,
    product: &ProductSpec,
    modes: &[PricingMode],
) -> Result<Vec<PremiumQuote>> {
    modes
        .iter()
        .map(|&mode| {
            let model = models.get(mode)?;
            let query = policy.query(mode == PricingMode::BestEstimate);
            let v = value(model, &query, policy.issue_age, product)?;
            let lump_sum = v.epv_benefits + v.epv_death_benefit;
            Ok(PremiumQuote {
                individual_id: policy.individual_id.clone(),
                issue_age: issue_age_floor(policy.issue_age),
                sensitive: policy.sensitive.clone(),
                mode,
                epv_benefits: v.epv_benefits,
                epv_premium_annuity: v.epv_premium_annuity,
                lump_sum,
                level_premium: (v.epv_premium_annuity > 0.0).then(|| lump_sum / v.epv_premium_annuity),
            })
        })
        .collect()
}

/// Quotes for every policy, grouped by mode in `modes` order.
pub fn quote_batch(
    policies: &[Policy],
    models: &PricingModels<'_>,
    product: &ProductSpec,
    modes: &[PricingMode],
) -> Result<Vec<PremiumQuote>> {
    let mut out = Vec::with_capacity(policies.len() * modes.len());
    for &mode in modes {
        let part: Vec<Vec<PremiumQuote>> = policies
            .par_iter()
            .map(|p| quote(p, models, product, &[mode]))
            .collect::<Result<_>>()?;
        out.extend(part.into_iter().flatten());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{constant_rates, BenefitSchedule, Covariates, FnRates, TransitionSpec};

    fn alive_only(v: f64, terminal: u32) -> ProductSpec {
        ProductSpec {
            premium_states: vec!["Alive".into()],
            benefit_states: vec!["Alive".into()],
            benefit: BenefitSchedule::Level(1.0),
            death_benefit: Some(1.0),
            death_state: "Dead".into(),
            discount: v,
            terminal_age: terminal,
            initial_state: "Alive".into(),
        }
    }

    #[test]
    fn counting_annuity() {
        let m = constant_rates(TransitionSpec::two_state(), vec![0.0]);
        let c = Covariates::default();
        let q = RateQuery::new(&c, None);
        let a = epv_premium_annuity(&m, &q, 60.0, &alive_only(1.0, 70)).unwrap();
        assert!((a - 11.0).abs() < 1e-12);
        let b = epv_benefits(&m, &q, 60.0, &alive_only(1.0, 65)).unwrap();
        assert!((b - 6.0).abs() < 1e-12);
    }

    #[test]
    fn certain_death_in_first_year() {
        // an intensity large enough that survival over one year underflows
        let m = constant_rates(TransitionSpec::two_state(), vec![800.0]);
        let c = Covariates::default();
        let q = RateQuery::new(&c, None);
        let a = epv_premium_annuity(&m, &q, 60.0, &alive_only(0.95, 80)).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
        let d = epv_death_benefit(&m, &q, 60.0, &alive_only(0.9, 80)).unwrap();
        assert!((d - 0.9).abs() < 1e-12);
    }

    #[test]
    fn zero_benefit_schedule() {
        let m = constant_rates(TransitionSpec::two_state(), vec![0.1]);
        let c = Covariates::default();
        let mut p = alive_only(0.97, 90);
        p.benefit = BenefitSchedule::Level(0.0);
        assert_eq!(epv_benefits(&m, &RateQuery::new(&c, None), 60.0, &p).unwrap(), 0.0);
    }

    #[test]
    fn undiscounted_death_benefit_telescopes() {
        let m = FnRates::new(TransitionSpec::two_state(), |_, a| 0.0005 * f64::from(a));
        let c = Covariates::default();
        let q = RateQuery::new(&c, None);
        let p = alive_only(1.0, 100);
        let d = epv_death_benefit(&m, &q, 50.0, &p).unwrap();
        let cum: f64 = (50..100).map(|a| 0.0005 * f64::from(a)).sum();
        assert!((d - (1.0 - (-cum).exp())).abs() < 1e-12);
    }

    #[test]
    fn ltci_edge_cases() {
        let spec = TransitionSpec::healthy_disabled_dead();
        let c = Covariates::default();
        let q = RateQuery::new(&c, None);
        let no_disability = constant_rates(spec.clone(), vec![0.0, 0.1, 0.02, 0.1]);
        assert_eq!(lump_sum_ltci(&no_disability, &q, 65.0).unwrap(), 0.0);
        let m = constant_rates(spec, vec![0.05, 0.1, 0.02, 0.1]);
        assert_eq!(lump_sum_ltci(&m, &q, 110.0).unwrap(), 0.0);
        assert!(lump_sum_ltci(&m, &q, 111.0).is_err());
        // fractional issue age is floored
        assert_eq!(
            lump_sum_ltci(&m, &q, 65.9).unwrap(),
            lump_sum_ltci(&m, &q, 65.0).unwrap()
        );
    }

    #[test]
    fn mode_model_checks() {
        let m = constant_rates(TransitionSpec::healthy_disabled_dead(), vec![0.05, 0.1, 0.02, 0.1]);
        let policy = Policy::new("1", Covariates::default(), 65.0, "A").unwrap();
        let models = PricingModels {
            best_estimate: Some(&m),
            blind: Some(&m),
            fairness_adjusted: None,
        };
        let product = ProductSpec::ltci();
        assert!(matches!(
            quote(&policy, &models, &product, &[PricingMode::BestEstimate]),
            Err(Error::ModeModelMismatch(_))
        ));
        assert!(matches!(
            quote(&policy, &models, &product, &[PricingMode::FairnessAdjusted]),
            Err(Error::ModeModelMismatch(_))
        ));
        let q = quote(&policy, &models, &product, &[PricingMode::Blind]).unwrap();
        assert_eq!(q.len(), 1);
        let level = q[0].level_premium.unwrap();
        assert!((level * q[0].epv_premium_annuity - q[0].lump_sum).abs() < 1e-12);
    }

    #[test]
    fn mode_strings() {
        for m in PricingMode::ALL {
            assert_eq!(m.as_str().parse::<PricingMode>().unwrap(), m);
        }
        assert!("median".parse::<PricingMode>().is_err());
    }
}
