//! Restructures observed trajectories into per-transition Poisson datasets.
//!
//! Each sojourn becomes one row per transition live from its state
//! ([`expand_exposure`]); rows are then cut at every birthday so the age
//! last birthday is constant within a row ([`split_by_age`]). The event
//! indicator stays on the final piece.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{Covariates, ExposureRow, Policy, Trajectory, TransitionSpec};

/// Absolute tolerance (years) when deciding whether an age sits on a
/// birthday.
pub const AGE_TOLERANCE: f64 = 1e-9;

/// Exposure of one individual to one transition during one sojourn.
#[derive(Debug, Clone, PartialEq)]
pub struct SojournRow {
    pub individual_id: Arc<str>,
    pub transition: usize,
    pub start_age: f64,
    pub end_age: f64,
    pub event: u32,
}

impl SojournRow {
    pub fn exposure(&self) -> f64 {
        self.end_age - self.start_age
    }
}

pub fn expand_exposure(traj: &Trajectory, spec: &TransitionSpec) -> Result<Vec<SojournRow>> {
    traj.validate(spec)?;
    let id: Arc<str> = traj.individual_id.as_str().into();
    let mut rows = Vec::new();
    for (i, sojourn) in traj.sojourns.iter().enumerate() {
        let from = spec.state_index(&sojourn.state)?;
        let taken = match traj.exit_state(i) {
            Some(to) => {
                let to = spec.state_index(to)?;
                Some(spec.find(from, to).ok_or_else(|| Error::IllegalTransition {
                    id: traj.individual_id.clone(),
                    from: sojourn.state.clone(),
                    to: spec.state_label(to).to_string(),
                })?)
            }
            None => None,
        };
        for m in spec.live_from(from) {
            rows.push(SojournRow {
                individual_id: id.clone(),
                transition: m,
                start_age: sojourn.start_age,
                end_age: sojourn.end_age,
                event: u32::from(taken == Some(m)),
            });
        }
    }
    Ok(rows)
}

/// One piece of a sojourn row that lies within a single age year.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgePiece {
    pub start_age: f64,
    pub end_age: f64,
    pub age: u32,
}

/// Cuts `[start, end)` at every birthday crossed.
///
/// A start within [`AGE_TOLERANCE`] of a birthday opens that birthday's
/// year; an end within tolerance of a birthday closes the year just
/// completed, so no zero-length pieces are produced.
pub fn age_pieces(start: f64, end: f64) -> Vec<AgePiece> {
    let mut pieces = Vec::new();
    let mut age = (start + AGE_TOLERANCE).floor();
    let mut cur = start;
    loop {
        let next = age + 1.0;
        if end <= next + AGE_TOLERANCE {
            pieces.push(AgePiece {
                start_age: cur,
                end_age: end,
                age: age as u32,
            });
            return pieces;
        }
        pieces.push(AgePiece {
            start_age: cur,
            end_age: next,
            age: age as u32,
        });
        cur = next;
        age = next;
    }
}

/// Splits sojourn rows at integer ages. Output rows carry no covariates.
pub fn split_by_age(rows: &[SojournRow]) -> Vec<ExposureRow> {
    let empty = Arc::new(Covariates::default());
    let mut out = Vec::with_capacity(rows.len() * 2);
    for row in rows {
        let pieces = age_pieces(row.start_age, row.end_age);
        let last = pieces.len() - 1;
        for (j, piece) in pieces.into_iter().enumerate() {
            out.push(ExposureRow {
                individual_id: row.individual_id.clone(),
                transition: row.transition,
                age: piece.age,
                event: if j == last { row.event } else { 0 },
                exposure: piece.end_age - piece.start_age,
                covariates: empty.clone(),
                sensitive: None,
            });
        }
    }
    out
}

/// [`expand_exposure`] followed by [`split_by_age`] over a whole study.
pub fn exposure_rows(trajectories: &[Trajectory], spec: &TransitionSpec) -> Result<Vec<ExposureRow>> {
    let mut out = Vec::new();
    for t in trajectories {
        out.extend(split_by_age(&expand_exposure(t, spec)?));
    }
    Ok(out)
}

/// Result of joining exposure rows to policy covariates.
#[derive(Debug, Clone, Default)]
pub struct Merged {
    pub rows: Vec<ExposureRow>,
    /// Rows removed because their individual has no policy record.
    pub dropped_rows: usize,
    pub dropped_individuals: usize,
}

/// Attaches each row's static covariates and sensitive attribute.
///
/// Rows of individuals absent from `policies` are removed and counted,
/// mirroring exclusion during covariate cleaning.
pub fn merge_covariates(rows: Vec<ExposureRow>, policies: &[Policy]) -> Merged {
    let by_id: HashMap<&str, &Policy> = policies.iter().map(|p| (&*p.individual_id, p)).collect();
    let mut merged = Merged::default();
    let mut missing: HashMap<Arc<str>, ()> = HashMap::new();
    for mut row in rows {
        match by_id.get(&*row.individual_id) {
            Some(p) => {
                row.covariates = p.covariates.clone();
                row.sensitive = Some(p.sensitive.clone());
                merged.rows.push(row);
            }
            None => {
                merged.dropped_rows += 1;
                missing.insert(row.individual_id.clone(), ());
            }
        }
    }
    merged.dropped_individuals = missing.len();
    merged
}

/// Like [`merge_covariates`] but every row's individual must have a policy.
pub fn merge_covariates_strict(rows: Vec<ExposureRow>, policies: &[Policy]) -> Result<Vec<ExposureRow>> {
    let by_id: HashMap<&str, &Policy> = policies.iter().map(|p| (&*p.individual_id, p)).collect();
    rows.into_iter()
        .map(|mut row| {
            let p = by_id
                .get(&*row.individual_id)
                .ok_or_else(|| Error::MissingIndividual(row.individual_id.to_string()))?;
            row.covariates = p.covariates.clone();
            row.sensitive = Some(p.sensitive.clone());
            Ok(row)
        })
        .collect()
}

/// One dataset per transition, preserving input order within each.
pub fn partition_by_transition(rows: Vec<ExposureRow>, n_transitions: usize) -> Vec<Vec<ExposureRow>> {
    let mut parts = vec![Vec::new(); n_transitions];
    for row in rows {
        parts[row.transition].push(row);
    }
    parts
}
