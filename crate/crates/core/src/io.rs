//! CSV input and output. Every file has a header row; floats are written
//! with 12 significant digits and trailing zeros removed.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::fairness::{EpochLog, ParityReport};
use crate::glm::GlmRateModel;
use crate::model::{CovariateValue, Covariates, ExposureRow, Policy, Sojourn, Terminal, Trajectory, TransitionSpec};
use crate::multistate::ProbabilityMatrix;
use crate::pricing::PremiumQuote;

/// Label written for a sojourn that ends without a transition.
pub const CENSORED: &str = "censored";

pub const TRAJECTORY_HEADER: [&str; 6] = [
    "individual_id",
    "initial_state",
    "ending_state",
    "starting_age",
    "ending_age",
    "exposure",
];

/// 12 significant digits, shortest decimal form.
pub fn fmt_f64(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "NaN".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let rounded: f64 = format!("{x:.11e}").parse().expect("formatted float parses");
    let s = format!("{rounded}");
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn write_table<P: AsRef<Path>>(path: P, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

struct Table {
    path: String,
    columns: HashMap<String, usize>,
    header: Vec<String>,
    records: Vec<(usize, csv::StringRecord)>,
}

impl Table {
    fn read<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path_str = path.as_ref().display().to_string();
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let columns = header.iter().enumerate().map(|(i, h)| (h.clone(), i)).collect();
        let mut records = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            records.push((line, rec));
        }
        Ok(Self {
            path: path_str,
            columns,
            header,
            records,
        })
    }

    fn err(&self, row: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            row,
            message: message.into(),
        }
    }

    fn require(&self, names: &[&str]) -> Result<()> {
        for n in names {
            if !self.columns.contains_key(*n) {
                return Err(self.err(1, format!("missing column `{n}`")));
            }
        }
        Ok(())
    }

    fn get<'a>(&self, rec: &'a csv::StringRecord, line: usize, name: &str) -> Result<&'a str> {
        rec.get(self.columns[name])
            .ok_or_else(|| self.err(line, format!("missing value for `{name}`")))
    }

    fn float(&self, rec: &csv::StringRecord, line: usize, name: &str) -> Result<f64> {
        let s = self.get(rec, line, name)?;
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err(line, format!("column `{name}`: `{s}` is not a number")))
    }

    fn uint(&self, rec: &csv::StringRecord, line: usize, name: &str) -> Result<u32> {
        let s = self.get(rec, line, name)?;
        s.parse::<u32>()
            .map_err(|_| self.err(line, format!("column `{name}`: `{s}` is not a nonnegative integer")))
    }
}

/// One row per sojourn; `ending_state` is the next state, the absorbing
/// state entered, or `censored`. Rows of one individual are consecutive.
pub fn write_trajectories<P: AsRef<Path>>(path: P, trajectories: &[Trajectory]) -> Result<()> {
    let rows = trajectories.iter().flat_map(|t| {
        t.sojourns.iter().enumerate().map(move |(i, s)| {
            vec![
                t.individual_id.clone(),
                s.state.clone(),
                t.exit_state(i).unwrap_or(CENSORED).to_string(),
                fmt_f64(s.start_age),
                fmt_f64(s.end_age),
                fmt_f64(s.end_age - s.start_age),
            ]
        })
    });
    write_table(path, &strings(&TRAJECTORY_HEADER), rows)
}

/// A file with no header row holds no trajectories.
pub fn read_trajectories<P: AsRef<Path>>(path: P) -> Result<Vec<Trajectory>> {
    let t = Table::read(path)?;
    if t.header.iter().all(String::is_empty) && t.records.is_empty() {
        return Ok(Vec::new());
    }
    t.require(&TRAJECTORY_HEADER[..5])?;
    let has_exposure = t.columns.contains_key("exposure");
    let mut out: Vec<Trajectory> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut open = false;
    for (line, rec) in &t.records {
        let line = *line;
        let id = t.get(rec, line, "individual_id")?;
        let state = t.get(rec, line, "initial_state")?;
        let ending = t.get(rec, line, "ending_state")?;
        let start = t.float(rec, line, "starting_age")?;
        let end = t.float(rec, line, "ending_age")?;
        if end <= start {
            return Err(t.err(line, format!("ending age {end} not after starting age {start}")));
        }
        if has_exposure {
            let e = t.float(rec, line, "exposure")?;
            if (e - (end - start)).abs() > 1e-6 {
                return Err(t.err(line, format!("exposure {e} differs from ending_age - starting_age")));
            }
        }
        let continues = open && out.last().is_some_and(|last| last.individual_id == id);
        if continues {
            let last = out.last_mut().unwrap();
            let prev = last.sojourns.last().unwrap();
            if prev.end_age != start {
                return Err(t.err(line, "starting age does not continue the previous row"));
            }
            match &last.terminal {
                Terminal::State(s) if s == state => {}
                _ => return Err(t.err(line, "initial state does not match previous ending state")),
            }
        } else {
            if !seen.insert(id.to_string()) {
                return Err(t.err(line, format!("rows of individual `{id}` are not consecutive")));
            }
            out.push(Trajectory {
                individual_id: id.to_string(),
                sojourns: Vec::new(),
                terminal: Terminal::Censored,
            });
        }
        let traj = out.last_mut().unwrap();
        traj.sojourns.push(Sojourn {
            state: state.to_string(),
            start_age: start,
            end_age: end,
        });
        if ending == CENSORED {
            traj.terminal = Terminal::Censored;
            open = false;
        } else {
            traj.terminal = Terminal::State(ending.to_string());
            open = true;
        }
    }
    Ok(out)
}

/// Ordered union of covariate names across `covs`.
fn covariate_names<'a>(covs: impl Iterator<Item = &'a Covariates>) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    let mut seen = BTreeSet::new();
    for c in covs {
        for n in c.names() {
            if seen.insert(n.to_string()) {
                names.push(n.to_string());
            }
        }
    }
    names
}

fn covariate_cell(c: &Covariates, name: &str) -> String {
    match c.get(name) {
        Some(CovariateValue::Real(v)) => fmt_f64(*v),
        Some(CovariateValue::Level(l)) => l.clone(),
        None => String::new(),
    }
}

pub fn write_policies<P: AsRef<Path>>(path: P, policies: &[Policy]) -> Result<()> {
    let names = covariate_names(policies.iter().map(|p| &*p.covariates));
    let mut header = strings(&["individual_id", "issue_age", "sensitive"]);
    header.extend(names.iter().cloned());
    let rows = policies.iter().map(|p| {
        let mut row = vec![
            p.individual_id.to_string(),
            fmt_f64(p.issue_age),
            p.sensitive.to_string(),
        ];
        row.extend(names.iter().map(|n| covariate_cell(&p.covariates, n)));
        row
    });
    write_table(path, &header, rows)
}

fn parse_covariates(
    t: &Table,
    rec: &csv::StringRecord,
    line: usize,
    names: &[String],
    categorical: &[String],
) -> Result<Covariates> {
    let mut cov = Covariates::default();
    for n in names {
        let raw = t.get(rec, line, n)?;
        if raw.is_empty() {
            return Err(t.err(line, format!("empty value for covariate `{n}`")));
        }
        let value = if categorical.contains(n) {
            CovariateValue::Level(raw.to_string())
        } else {
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => CovariateValue::Real(v),
                _ => CovariateValue::Level(raw.to_string()),
            }
        };
        cov.set(n, value);
    }
    Ok(cov)
}

/// Columns other than `individual_id`, `issue_age` and `sensitive` are
/// covariates: numeric cells are real-valued unless the column is listed in
/// `categorical`, other cells are levels.
pub fn read_policies<P: AsRef<Path>>(path: P, categorical: &[String]) -> Result<Vec<Policy>> {
    let t = Table::read(path)?;
    t.require(&["individual_id", "issue_age", "sensitive"])?;
    let names: Vec<String> = t
        .header
        .iter()
        .filter(|h| !matches!(h.as_str(), "individual_id" | "issue_age" | "sensitive"))
        .cloned()
        .collect();
    let mut out = Vec::with_capacity(t.records.len());
    let mut seen = BTreeSet::new();
    for (line, rec) in &t.records {
        let line = *line;
        let id = t.get(rec, line, "individual_id")?;
        if !seen.insert(id.to_string()) {
            return Err(t.err(line, format!("duplicate individual `{id}`")));
        }
        let age = t.float(rec, line, "issue_age")?;
        let s = t.get(rec, line, "sensitive")?;
        let cov = parse_covariates(&t, rec, line, &names, categorical)?;
        out.push(Policy::new(id, cov, age, s).map_err(|e| t.err(line, e.to_string()))?);
    }
    Ok(out)
}

/// `individual_id, transition (1-based), age, event, exposure`, then
/// `sensitive` if any row carries it, then covariates.
pub fn write_exposure_rows<P: AsRef<Path>>(path: P, rows: &[ExposureRow]) -> Result<()> {
    let names = covariate_names(rows.iter().map(|r| &*r.covariates));
    let with_s = rows.iter().any(|r| r.sensitive.is_some());
    let mut header = strings(&["individual_id", "transition", "age", "event", "exposure"]);
    if with_s {
        header.push("sensitive".into());
    }
    header.extend(names.iter().cloned());
    let out = rows.iter().map(|r| {
        let mut row = vec![
            r.individual_id.to_string(),
            (r.transition + 1).to_string(),
            r.age.to_string(),
            r.event.to_string(),
            fmt_f64(r.exposure),
        ];
        if with_s {
            row.push(r.sensitive.as_deref().unwrap_or("").to_string());
        }
        row.extend(names.iter().map(|n| covariate_cell(&r.covariates, n)));
        row
    });
    write_table(path, &header, out)
}

pub fn read_exposure_rows<P: AsRef<Path>>(
    path: P,
    n_transitions: usize,
    categorical: &[String],
) -> Result<Vec<ExposureRow>> {
    let t = Table::read(path)?;
    t.require(&["individual_id", "transition", "age", "event", "exposure"])?;
    let fixed = ["individual_id", "transition", "age", "event", "exposure", "sensitive"];
    let names: Vec<String> = t
        .header
        .iter()
        .filter(|h| !fixed.contains(&h.as_str()))
        .cloned()
        .collect();
    let with_s = t.columns.contains_key("sensitive");
    let mut out = Vec::with_capacity(t.records.len());
    let mut ids: HashMap<String, Arc<str>> = HashMap::new();
    for (line, rec) in &t.records {
        let line = *line;
        let m = t.uint(rec, line, "transition")? as usize;
        if m == 0 || m > n_transitions {
            return Err(t.err(line, format!("transition {m} outside 1..={n_transitions}")));
        }
        let event = t.uint(rec, line, "event")?;
        if event > 1 {
            return Err(t.err(line, format!("event {event} is not 0 or 1")));
        }
        let exposure = t.float(rec, line, "exposure")?;
        if exposure <= 0.0 {
            return Err(t.err(line, "exposure must be positive"));
        }
        let id = t.get(rec, line, "individual_id")?;
        let id = ids.entry(id.to_string()).or_insert_with(|| Arc::from(id)).clone();
        let sensitive = if with_s {
            Some(t.get(rec, line, "sensitive")?)
                .filter(|s| !s.is_empty())
                .map(Arc::from)
        } else {
            None
        };
        out.push(ExposureRow {
            individual_id: id,
            transition: m - 1,
            age: t.uint(rec, line, "age")?,
            event,
            exposure,
            covariates: Arc::new(parse_covariates(&t, rec, line, &names, categorical)?),
            sensitive,
        });
    }
    Ok(out)
}

/// `transition, term, estimate, std_error`.
pub fn write_coefficients<P: AsRef<Path>>(path: P, model: &GlmRateModel) -> Result<()> {
    use crate::model::TransitionRates;
    let spec = model.transitions();
    let mut rows = Vec::new();
    for m in 0..spec.n_transitions() {
        let enc = model.encoding(m);
        let beta = model.coefficients(m);
        for (j, col) in enc.columns().iter().enumerate() {
            let se = model.fit_result(m).map_or(f64::NAN, |f| f.std_errors[j]);
            rows.push(vec![
                spec.transition_name(m),
                col.clone(),
                fmt_f64(beta[j]),
                fmt_f64(se),
            ]);
        }
    }
    write_table(path, &strings(&["transition", "term", "estimate", "std_error"]), rows)
}

/// One row per covariate, one column per transition, plus the row total.
pub fn write_contributions<P: AsRef<Path>>(path: P, spec: &TransitionSpec, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut header = vec!["covariate".to_string()];
    header.extend((0..spec.n_transitions()).map(|m| spec.transition_name(m)));
    header.push("total".into());
    let out = rows.iter().map(|(name, vals)| {
        let mut row = vec![name.clone()];
        row.extend(vals.iter().map(|v| fmt_f64(*v)));
        row.push(fmt_f64(vals.iter().sum()));
        row
    });
    write_table(path, &header, out)
}

pub fn write_quotes<P: AsRef<Path>>(path: P, quotes: &[PremiumQuote]) -> Result<()> {
    let header = strings(&[
        "individual_id",
        "sensitive",
        "issue_age",
        "mode",
        "epv_benefits",
        "epv_premium_annuity",
        "lump_sum",
        "level_premium",
    ]);
    let rows = quotes.iter().map(|q| {
        vec![
            q.individual_id.to_string(),
            q.sensitive.to_string(),
            q.issue_age.to_string(),
            q.mode.to_string(),
            fmt_f64(q.epv_benefits),
            fmt_f64(q.epv_premium_annuity),
            fmt_f64(q.lump_sum),
            q.level_premium.map(fmt_f64).unwrap_or_default(),
        ]
    });
    write_table(path, &header, rows)
}

/// One row per (label, sensitive level): group size, mean premium, the
/// report's parity gap and KS distances to every level.
pub fn write_fairness_report<P: AsRef<Path>>(path: P, reports: &[(String, ParityReport)]) -> Result<()> {
    let levels: Vec<String> = reports
        .iter()
        .flat_map(|(_, r)| r.groups.iter().map(|g| g.level.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut header = strings(&["mode", "age", "sensitive", "n", "mean_premium", "parity_gap"]);
    header.extend(levels.iter().map(|l| format!("ks_{l}")));
    let mut rows = Vec::new();
    for (label, r) in reports {
        for g in &r.groups {
            let mut row = vec![
                label.clone(),
                r.age.to_string(),
                g.level.clone(),
                g.n.to_string(),
                fmt_f64(g.mean),
                fmt_f64(r.gap),
            ];
            for l in &levels {
                let ks = if *l == g.level {
                    Some(0.0)
                } else {
                    r.pairs
                        .iter()
                        .find(|p| (p.a == g.level && p.b == *l) || (p.b == g.level && p.a == *l))
                        .map(|p| p.ks)
                };
                row.push(ks.map(fmt_f64).unwrap_or_default());
            }
            rows.push(row);
        }
    }
    write_table(path, &header, rows)
}

pub fn write_training_log<P: AsRef<Path>>(path: P, log: &[EpochLog]) -> Result<()> {
    let header = strings(&[
        "epoch",
        "loss",
        "loss_adv",
        "adversary_accuracy",
        "loss_pred",
        "validation_loss",
        "validation_loss_pred",
    ]);
    let rows = log.iter().map(|e| {
        vec![
            e.epoch.to_string(),
            fmt_f64(e.loss),
            fmt_f64(e.adv_loss),
            fmt_f64(e.adversary_accuracy),
            fmt_f64(e.pred_loss),
            fmt_f64(e.validation_loss),
            fmt_f64(e.validation_pred_loss),
        ]
    });
    write_table(path, &header, rows)
}

/// `from_age, to_age, from_state, to_state, probability`.
pub fn write_probabilities<P: AsRef<Path>>(
    path: P,
    spec: &TransitionSpec,
    matrices: &[ProbabilityMatrix],
) -> Result<()> {
    let mut rows = Vec::new();
    for pm in matrices {
        for i in 0..spec.n_states() {
            for j in 0..spec.n_states() {
                rows.push(vec![
                    pm.from_age.to_string(),
                    pm.to_age.to_string(),
                    spec.state_label(i).to_string(),
                    spec.state_label(j).to_string(),
                    fmt_f64(pm.p[(i, j)]),
                ]);
            }
        }
    }
    write_table(
        path,
        &strings(&["from_age", "to_age", "from_state", "to_state", "probability"]),
        rows,
    )
}

/// `age`, then the probability of each state.
pub fn write_occupancy<P: AsRef<Path>>(
    path: P,
    spec: &TransitionSpec,
    from_age: u32,
    dists: &[DVector<f64>],
) -> Result<()> {
    let mut header = vec!["age".to_string()];
    header.extend(spec.states().iter().cloned());
    let rows = dists.iter().enumerate().map(|(k, d)| {
        let mut row = vec![(from_age + k as u32).to_string()];
        row.extend(d.iter().map(|p| fmt_f64(*p)));
        row
    });
    write_table(path, &header, rows)
}

/// One point of a premium-by-age curve.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub mode: String,
    pub sensitive: String,
    pub issue_age: u32,
    pub n: usize,
    pub mean_premium: f64,
    pub smoothed_premium: f64,
}

pub fn write_plot_data<P: AsRef<Path>>(path: P, points: &[PlotPoint]) -> Result<()> {
    let header = strings(&[
        "mode",
        "sensitive",
        "issue_age",
        "n",
        "mean_premium",
        "smoothed_premium",
    ]);
    let rows = points.iter().map(|p| {
        vec![
            p.mode.clone(),
            p.sensitive.clone(),
            p.issue_age.to_string(),
            p.n.to_string(),
            fmt_f64(p.mean_premium),
            fmt_f64(p.smoothed_premium),
        ]
    });
    write_table(path, &header, rows)
}
