//! Fairness adjustments (post-processing by averaging over the sensitive
//! attribute, optimal-transport pre-processing, adversarial in-processing)
//! and demographic-parity metrics.

mod adversarial;
pub mod nn;
mod ot;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Policy, RateQuery, TransitionRates, TransitionSpec};
use crate::pricing::PremiumQuote;

pub use adversarial::{
    adversarial_fit, adversarial_fit_divided, gradient_check, AdversarialData, AdversarialFit, AdversarialNet,
    DividedFit, EpochLog, NetConfig, TrainConfig,
};
pub use ot::{ks_distance, ot_preprocess, pooled_quantile};

/// A distribution over sensitive levels.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitiveDistribution {
    levels: Vec<String>,
    weights: Vec<f64>,
}

impl SensitiveDistribution {
    pub fn new(levels: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if levels.is_empty() || levels.len() != weights.len() {
            return Err(Error::invalid("need one weight per sensitive level"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("sensitive weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("sensitive weights sum to {total}")));
        }
        for (i, l) in levels.iter().enumerate() {
            if levels[..i].contains(l) {
                return Err(Error::invalid(format!("duplicate sensitive level `{l}`")));
            }
        }
        Ok(Self { levels, weights })
    }

    /// All mass on `level`.
    pub fn point_mass(level: &str) -> Self {
        Self {
            levels: vec![level.to_string()],
            weights: vec![1.0],
        }
    }

    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, level: &str) -> f64 {
        self.levels
            .iter()
            .position(|l| l == level)
            .map_or(0.0, |i| self.weights[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.levels.iter().map(String::as_str).zip(self.weights.iter().copied())
    }
}

/// Level frequencies over policies, one count per insured regardless of
/// how many exposure rows the insured contributes. Levels are sorted.
pub fn policy_level_distribution(policies: &[Policy]) -> Result<SensitiveDistribution> {
    if policies.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in policies {
        *counts.entry(&p.sensitive).or_default() += 1;
    }
    let n = policies.len() as f64;
    let (levels, weights) = counts.into_iter().map(|(l, c)| (l.to_string(), c as f64 / n)).unzip();
    Ok(SensitiveDistribution { levels, weights })
}

fn check_levels<M: TransitionRates + ?Sized>(model: &M, dist: &SensitiveDistribution) -> Result<()> {
    if !model.uses_sensitive() {
        return Err(Error::ModeModelMismatch(
            "discrimination-free rates need a model fitted with the sensitive attribute".into(),
        ));
    }
    for m in 0..model.transitions().n_transitions() {
        let Some(fitted) = model.sensitive_levels(m) else {
            continue;
        };
        if dist.iter().any(|(l, w)| w > 0.0 && !fitted.iter().any(|f| f == l)) {
            return Err(Error::LevelMismatch {
                expected: fitted,
                found: dist.levels.clone(),
            });
        }
    }
    Ok(())
}

/// `lambda*_m(z, x) = sum_s w_s lambda_m(z, x, s)`. Any sensitive value on
/// `query` is ignored.
pub fn discrimination_free_rate<M: TransitionRates + ?Sized>(
    model: &M,
    m: usize,
    query: &RateQuery<'_>,
    age: u32,
    dist: &SensitiveDistribution,
) -> Result<f64> {
    check_levels(model, dist)?;
    mixture(model, m, query, age, dist)
}

fn mixture<M: TransitionRates + ?Sized>(
    model: &M,
    m: usize,
    query: &RateQuery<'_>,
    age: u32,
    dist: &SensitiveDistribution,
) -> Result<f64> {
    let mut rate = 0.0;
    for (level, w) in dist.iter() {
        if w == 0.0 {
            continue;
        }
        let q = RateQuery::new(query.covariates, Some(level));
        rate += w * model.rate(m, &q, age)?;
    }
    Ok(rate)
}

/// Rates averaged over a fixed sensitive distribution. Never reads the
/// sensitive attribute of a query.
pub struct DiscriminationFreeModel<M> {
    inner: M,
    dist: SensitiveDistribution,
}

impl<M: TransitionRates> DiscriminationFreeModel<M> {
    pub fn new(inner: M, dist: SensitiveDistribution) -> Result<Self> {
        check_levels(&inner, &dist)?;
        Ok(Self { inner, dist })
    }

    pub fn distribution(&self) -> &SensitiveDistribution {
        &self.dist
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: TransitionRates> TransitionRates for DiscriminationFreeModel<M> {
    fn transitions(&self) -> &TransitionSpec {
        self.inner.transitions()
    }

    fn rate(&self, m: usize, query: &RateQuery<'_>, age: u32) -> Result<f64> {
        mixture(&self.inner, m, query, age, &self.dist)
    }

    fn uses_sensitive(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub level: String,
    pub n: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDistance {
    pub a: String,
    pub b: String,
    pub mean_difference: f64,
    pub ks: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParityReport {
    pub age: u32,
    pub groups: Vec<GroupSummary>,
    pub pairs: Vec<PairDistance>,
    /// Largest absolute difference of group means.
    pub gap: f64,
}

/// Parity of single premiums across sensitive groups for quotes issued at
/// age `age`.
pub fn demographic_parity_gap(quotes: &[PremiumQuote], age: u32) -> Result<ParityReport> {
    if let Some(q) = quotes.iter().find(|q| q.issue_age != age) {
        return Err(Error::invalid(format!(
            "quote for `{}` issued at {} not {age}",
            q.individual_id, q.issue_age
        )));
    }
    if let Some(q) = quotes.iter().find(|q| q.mode != quotes[0].mode) {
        return Err(Error::invalid(format!(
            "quotes mix modes {} and {}",
            quotes[0].mode, q.mode
        )));
    }
    let values: Vec<(&str, f64)> = quotes.iter().map(|q| (&*q.sensitive, q.lump_sum)).collect();
    parity_of(&values, age)
}

/// Parity across groups of arbitrary per-insured values.
pub fn parity_of(values: &[(&str, f64)], age: u32) -> Result<ParityReport> {
    let mut by_level: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for &(l, v) in values {
        by_level.entry(l).or_default().push(v);
    }
    if by_level.len() < 2 {
        return Err(Error::InsufficientGroups(by_level.len()));
    }
    let groups: Vec<GroupSummary> = by_level
        .iter()
        .map(|(l, v)| GroupSummary {
            level: l.to_string(),
            n: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
        .collect();
    let samples: Vec<&Vec<f64>> = by_level.values().collect();
    let mut pairs = Vec::new();
    let mut gap: f64 = 0.0;
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let d = groups[i].mean - groups[j].mean;
            gap = gap.max(d.abs());
            pairs.push(PairDistance {
                a: groups[i].level.clone(),
                b: groups[j].level.clone(),
                mean_difference: d,
                ks: ks_distance(samples[i], samples[j]),
            });
        }
    }
    Ok(ParityReport {
        age,
        groups,
        pairs,
        gap,
    })
}
