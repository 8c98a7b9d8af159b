//! Covariate-to-column encoding, frozen at fit time and reused for scoring.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{CovariateValue, ExposureRow, RateQuery};

pub const INTERCEPT: &str = "(Intercept)";
pub const AGE: &str = "age";
pub const SENSITIVE: &str = "sensitive";

/// How age enters the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AgeTerm {
    None,
    /// One slope on age last birthday.
    #[default]
    Linear,
    /// One level per observed age (saturated); the lowest age is the reference.
    Factor,
}

/// Which inputs a per-transition regression uses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Formula {
    pub covariates: Vec<String>,
    pub age: AgeTerm,
    pub sensitive: bool,
}

impl Formula {
    pub fn new<S: AsRef<str>>(covariates: &[S], age: AgeTerm, sensitive: bool) -> Self {
        Self {
            covariates: covariates.iter().map(|s| s.as_ref().to_string()).collect(),
            age,
            sensitive,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Intercept,
    Age,
    AgeFactor {
        ages: Vec<u32>,
    },
    Real {
        name: String,
    },
    /// Treatment-coded; `levels[0]` (lexicographically first) is the reference.
    Categorical {
        name: String,
        levels: Vec<String>,
    },
    Sensitive {
        levels: Vec<String>,
    },
}

impl Term {
    fn source(&self) -> &str {
        match self {
            Term::Intercept => INTERCEPT,
            Term::Age | Term::AgeFactor { .. } => AGE,
            Term::Real { name } | Term::Categorical { name, .. } => name,
            Term::Sensitive { .. } => SENSITIVE,
        }
    }

    fn width(&self) -> usize {
        match self {
            Term::Intercept | Term::Age | Term::Real { .. } => 1,
            Term::AgeFactor { ages } => ages.len() - 1,
            Term::Categorical { levels, .. } | Term::Sensitive { levels } => levels.len() - 1,
        }
    }
}

/// Ordered terms and the design columns they expand to.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    terms: Vec<Term>,
    columns: Vec<String>,
    sources: Vec<String>,
}

impl Encoding {
    pub fn from_terms(terms: Vec<Term>) -> Self {
        let mut columns = Vec::new();
        let mut sources = Vec::new();
        for term in &terms {
            let src = term.source().to_string();
            match term {
                Term::Intercept => columns.push(INTERCEPT.to_string()),
                Term::Age => columns.push(AGE.to_string()),
                Term::Real { name } => columns.push(name.clone()),
                Term::AgeFactor { ages } => columns.extend(ages[1..].iter().map(|a| format!("{AGE}[{a}]"))),
                Term::Categorical { name, levels } => {
                    columns.extend(levels[1..].iter().map(|l| format!("{name}[{l}]")))
                }
                Term::Sensitive { levels } => columns.extend(levels[1..].iter().map(|l| format!("{SENSITIVE}[{l}]"))),
            }
            sources.extend(std::iter::repeat_n(src, term.width()));
        }
        Self {
            terms,
            columns,
            sources,
        }
    }

    /// Derives the encoding from the rows a model is fitted on.
    pub fn fit(formula: &Formula, rows: &[ExposureRow]) -> Result<Self> {
        let mut terms = vec![Term::Intercept];
        match formula.age {
            AgeTerm::None => {}
            AgeTerm::Linear => terms.push(Term::Age),
            AgeTerm::Factor => {
                let ages: BTreeSet<u32> = rows.iter().map(|r| r.age).collect();
                if ages.is_empty() {
                    return Err(Error::DegenerateDesign("no rows to derive age levels".into()));
                }
                terms.push(Term::AgeFactor {
                    ages: ages.into_iter().collect(),
                });
            }
        }
        for name in &formula.covariates {
            if name == AGE || name == SENSITIVE || name == INTERCEPT {
                return Err(Error::invalid(format!("reserved covariate name `{name}`")));
            }
            let mut levels = BTreeSet::new();
            let mut real = false;
            for row in rows {
                match row.covariates.get(name) {
                    Some(CovariateValue::Real(_)) => real = true,
                    Some(CovariateValue::Level(l)) => {
                        levels.insert(l.clone());
                    }
                    None => return Err(Error::MissingCovariate(name.clone())),
                }
            }
            if real && !levels.is_empty() {
                return Err(Error::CovariateKind {
                    covariate: name.clone(),
                    expected: "one kind across rows",
                });
            }
            if real || rows.is_empty() {
                terms.push(Term::Real { name: name.clone() });
            } else {
                terms.push(Term::Categorical {
                    name: name.clone(),
                    levels: levels.into_iter().collect(),
                });
            }
        }
        if formula.sensitive {
            let mut levels = BTreeSet::new();
            for row in rows {
                let s = row
                    .sensitive
                    .as_ref()
                    .ok_or_else(|| Error::MissingCovariate(SENSITIVE.into()))?;
                levels.insert(s.to_string());
            }
            if levels.is_empty() {
                return Err(Error::DegenerateDesign("no sensitive levels".into()));
            }
            terms.push(Term::Sensitive {
                levels: levels.into_iter().collect(),
            });
        }
        Ok(Self::from_terms(terms))
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    /// The covariate (or `age`, `sensitive`, intercept) each column derives from.
    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn uses_sensitive(&self) -> bool {
        self.terms.iter().any(|t| matches!(t, Term::Sensitive { .. }))
    }

    pub fn sensitive_levels(&self) -> Option<&[String]> {
        self.terms.iter().find_map(|t| match t {
            Term::Sensitive { levels } => Some(levels.as_slice()),
            _ => None,
        })
    }

    /// Appends the design row for `(query, age)` to `out`.
    pub fn encode_into(&self, query: &RateQuery<'_>, age: u32, out: &mut Vec<f64>) -> Result<()> {
        for term in &self.terms {
            match term {
                Term::Intercept => out.push(1.0),
                Term::Age => out.push(f64::from(age)),
                Term::AgeFactor { ages } => {
                    if !ages.contains(&age) {
                        return Err(Error::UnknownLevel {
                            covariate: AGE.into(),
                            level: age.to_string(),
                        });
                    }
                    out.extend(ages[1..].iter().map(|&a| f64::from(u8::from(a == age))));
                }
                Term::Real { name } => out.push(query.covariates.real(name)?),
                Term::Categorical { name, levels } => {
                    let level = match query.covariates.get(name) {
                        Some(CovariateValue::Level(l)) => l,
                        Some(CovariateValue::Real(_)) => {
                            return Err(Error::CovariateKind {
                                covariate: name.clone(),
                                expected: "categorical",
                            })
                        }
                        None => return Err(Error::MissingCovariate(name.clone())),
                    };
                    one_hot(name, levels, level, out)?;
                }
                Term::Sensitive { levels } => {
                    let s = query
                        .sensitive
                        .ok_or_else(|| Error::MissingCovariate(SENSITIVE.into()))?;
                    one_hot(SENSITIVE, levels, s, out)?;
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self, query: &RateQuery<'_>, age: u32) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.width());
        self.encode_into(query, age, &mut out)?;
        Ok(out)
    }

    /// Plain-text description, one `term = ...` line per term.
    pub fn card(&self) -> String {
        let mut s = String::new();
        for term in &self.terms {
            let _ = match term {
                Term::Intercept => writeln!(s, "term = intercept"),
                Term::Age => writeln!(s, "term = age linear"),
                Term::AgeFactor { ages } => writeln!(
                    s,
                    "term = age factor: {}",
                    ages.iter().map(u32::to_string).collect::<Vec<_>>().join(", ")
                ),
                Term::Real { name } => writeln!(s, "term = real {name}"),
                Term::Categorical { name, levels } => {
                    writeln!(s, "term = categorical {name}: {}", levels.join(", "))
                }
                Term::Sensitive { levels } => writeln!(s, "term = sensitive: {}", levels.join(", ")),
            };
        }
        s
    }
}

fn one_hot(name: &str, levels: &[String], level: &str, out: &mut Vec<f64>) -> Result<()> {
    if !levels.iter().any(|l| l == level) {
        return Err(Error::UnknownLevel {
            covariate: name.to_string(),
            level: level.to_string(),
        });
    }
    out.extend(levels[1..].iter().map(|l| f64::from(u8::from(l == level))));
    Ok(())
}
