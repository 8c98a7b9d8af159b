//! Pre-processing by per-coordinate quantile matching: within each
//! sensitive group, a covariate value is replaced by the pooled empirical
//! quantile at the value's within-group rank.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CovariateValue, Policy};

/// Pooled quantile at probability `u` from sorted values, interpolating
/// linearly between plotting positions `(j - 0.5) / n` and clamping
/// outside them.
pub fn pooled_quantile(sorted: &[f64], u: f64) -> f64 {
    let n = sorted.len();
    let pos = u * n as f64 - 0.5;
    if pos <= 0.0 {
        return sorted[0];
    }
    if pos >= (n - 1) as f64 {
        return sorted[n - 1];
    }
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Two-sample Kolmogorov-Smirnov distance `sup |F_a - F_b|`.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { 1.0 };
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Mid-ranks (1-based, ties averaged) of `values`.
fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

/// Transformed values for one coordinate.
fn transport(values: &[f64], groups: &[usize], n_groups: usize) -> Vec<f64> {
    let mut pooled = values.to_vec();
    pooled.sort_by(f64::total_cmp);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (i, &g) in groups.iter().enumerate() {
        members[g].push(i);
    }
    let mut out = vec![0.0; values.len()];
    for idx in members.iter().filter(|m| !m.is_empty()) {
        let group: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        let n = group.len() as f64;
        for (&i, r) in idx.iter().zip(mid_ranks(&group)) {
            out[i] = pooled_quantile(&pooled, (r - 0.5) / n);
        }
    }
    out
}

/// Replaces each named continuous covariate by its group-to-pooled
/// quantile map. Other covariates, issue ages and sensitive labels pass
/// through unchanged.
pub fn ot_preprocess<S: AsRef<str> + Sync>(policies: &[Policy], covariates: &[S]) -> Result<Vec<Policy>> {
    if policies.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut group_ids: BTreeMap<&str, usize> = BTreeMap::new();
    for p in policies {
        let next = group_ids.len();
        group_ids.entry(&p.sensitive).or_insert(next);
    }
    let groups: Vec<usize> = policies.iter().map(|p| group_ids[&*p.sensitive]).collect();

    let columns: Vec<Vec<f64>> = covariates
        .par_iter()
        .map(|name| {
            let name = name.as_ref();
            let values = policies
                .iter()
                .map(|p| match p.covariates.get(name) {
                    Some(CovariateValue::Real(v)) => Ok(*v),
                    Some(CovariateValue::Level(_)) => Err(Error::NonContinuous(name.to_string())),
                    None => Err(Error::UnknownCovariate(name.to_string())),
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(transport(&values, &groups, group_ids.len()))
        })
        .collect::<Result<_>>()?;

    Ok(policies
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut cov = (*p.covariates).clone();
            for (name, col) in covariates.iter().zip(&columns) {
                cov.set(name.as_ref(), CovariateValue::Real(col[i]));
            }
            Policy {
                covariates: Arc::new(cov),
                ..p.clone()
            }
        })
        .collect())
}
