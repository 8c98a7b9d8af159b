use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use msfair::fairness::{
    adversarial_fit, adversarial_fit_divided, demographic_parity_gap, ks_distance, ot_preprocess,
    policy_level_distribution, AdversarialFit, DiscriminationFreeModel, ParityReport,
};
use msfair::glm::{Formula, GlmRateModel, SENSITIVE};
use msfair::io::{self, fmt_f64, PlotPoint};
use msfair::model::{CovariateValue, ExposureRow, Policy, TransitionRates};
use msfair::multistate::{multi_year_probs, state_occupancy};
use msfair::pipeline::{exposure_rows, merge_covariates, partition_by_transition};
use msfair::pricing::{issue_age_floor, quote_batch, PremiumQuote, PricingMode, PricingModels};
use msfair::synthetic::{generate_population, generate_study};

use crate::config::{FairMode, RunConfig, Variant, PRICING_AGES};
use crate::error::{config, CliResult};

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| config(format!("missing key `paths.{key}`")))
}

fn load_policies(cfg: &RunConfig) -> CliResult<Vec<Policy>> {
    let path = required(&cfg.paths.policies, "policies")?;
    Ok(io::read_policies(path, &cfg.paths.categorical)?)
}

/// Exposure rows from `paths.exposure`, else built from `paths.trajectories`,
/// joined to `policies`.
fn load_rows(cfg: &RunConfig, policies: &[Policy]) -> CliResult<Vec<ExposureRow>> {
    let rows = match (&cfg.paths.exposure, &cfg.paths.trajectories) {
        (Some(p), _) => io::read_exposure_rows(p, cfg.spec.n_transitions(), &cfg.paths.categorical)?,
        (None, Some(p)) => exposure_rows(&io::read_trajectories(p)?, &cfg.spec)?,
        (None, None) => return Err(config("missing key `paths.exposure` or `paths.trajectories`")),
    };
    Ok(join(rows, policies))
}

/// Attaches policy covariates, dropping rows without a policy.
fn join(rows: Vec<ExposureRow>, policies: &[Policy]) -> Vec<ExposureRow> {
    let merged = merge_covariates(rows, policies);
    if merged.dropped_rows > 0 {
        warn!(
            "dropped {} rows of {} individuals without a policy record",
            merged.dropped_rows, merged.dropped_individuals
        );
    }
    merged.rows
}

fn covariates(cfg: &RunConfig, policies: &[Policy]) -> Vec<String> {
    match &cfg.model.covariates {
        Some(c) => c.clone(),
        None => policies
            .first()
            .map(|p| p.covariates.names().map(str::to_string).collect())
            .unwrap_or_default(),
    }
}

fn fit(
    cfg: &RunConfig,
    policies: &[Policy],
    datasets: &[Vec<ExposureRow>],
    sensitive: bool,
) -> CliResult<GlmRateModel> {
    let formula = Formula::new(&covariates(cfg, policies), cfg.model.age, sensitive);
    Ok(GlmRateModel::fit(&cfg.spec, datasets, &formula)?)
}

fn check_pricing_age(age: f64, what: &str) -> CliResult<()> {
    let (lo, hi) = PRICING_AGES;
    if !(lo..=hi).contains(&age) {
        return Err(config(format!("{what}: issue age {age} outside [{lo}, {hi}]")));
    }
    Ok(())
}

/// Copies of `policies` all issued at `age`.
fn issued_at(policies: &[Policy], age: u32) -> Vec<Policy> {
    policies
        .iter()
        .map(|p| Policy {
            issue_age: age as f64,
            ..p.clone()
        })
        .collect()
}

fn parity(quotes: &[PremiumQuote], age: u32) -> CliResult<ParityReport> {
    Ok(demographic_parity_gap(quotes, age)?)
}

pub fn simulate(ctx: &Context) -> CliResult<()> {
    let spec = ctx.cfg.scenario_spec()?;
    let policies = generate_population(&spec)?;
    let trajectories = generate_study(&spec, &ctx.cfg.spec, &policies)?;
    io::write_trajectories(ctx.path("trajectories.csv"), &trajectories)?;
    io::write_policies(ctx.path("policies.csv"), &policies)?;
    info!("simulated {} individuals", policies.len());
    Ok(())
}

pub fn transform(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let trajectories = io::read_trajectories(required(&cfg.paths.trajectories, "trajectories")?)?;
    let mut rows = exposure_rows(&trajectories, &cfg.spec)?;
    if cfg.paths.policies.is_some() {
        rows = join(rows, &load_policies(cfg)?);
    }
    io::write_exposure_rows(ctx.path("exposure.csv"), &rows)?;
    info!("{} trajectories to {} exposure rows", trajectories.len(), rows.len());
    Ok(())
}

pub fn fit_cmd(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let policies = load_policies(cfg)?;
    let datasets = partition_by_transition(load_rows(cfg, &policies)?, cfg.spec.n_transitions());
    let model = fit(cfg, &policies, &datasets, cfg.model.sensitive)?;
    std::fs::write(ctx.path("model_card.txt"), model.card())?;
    io::write_coefficients(ctx.path("coefficients.csv"), &model)?;

    let mut names = cfg
        .model
        .contributions
        .clone()
        .unwrap_or_else(|| covariates(cfg, &policies));
    if cfg.model.sensitive && cfg.model.contributions.is_none() {
        names.push(SENSITIVE.to_string());
    }
    let contributions = names
        .into_iter()
        .map(|n| Ok((n.clone(), model.likelihood_contributions(&datasets, &n)?)))
        .collect::<CliResult<Vec<_>>>()?;
    io::write_contributions(ctx.path("contributions.csv"), &cfg.spec, &contributions)?;
    Ok(())
}

/// Per mode and group, mean premium by integer issue age and its centred
/// moving average over `window` ages.
fn plot_points(quotes: &[PremiumQuote], window: usize) -> Vec<PlotPoint> {
    let mut cells: BTreeMap<(PricingMode, &str), BTreeMap<u32, (usize, f64)>> = BTreeMap::new();
    for q in quotes {
        let c = cells
            .entry((q.mode, &*q.sensitive))
            .or_default()
            .entry(q.issue_age)
            .or_default();
        c.0 += 1;
        c.1 += q.lump_sum;
    }
    let half = (window / 2) as u32;
    let mut out = Vec::new();
    for ((mode, level), by_age) in &cells {
        for (&age, &(n, sum)) in by_age {
            let (wn, wsum) = by_age
                .range(age.saturating_sub(half)..=age + half)
                .fold((0, 0.0), |(a, b), (_, &(n, s))| (a + n, b + s));
            out.push(PlotPoint {
                mode: mode.to_string(),
                sensitive: level.to_string(),
                issue_age: age,
                n,
                mean_premium: sum / n as f64,
                smoothed_premium: wsum / wn as f64,
            });
        }
    }
    out
}

pub fn price(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let policies = load_policies(cfg)?;
    for p in &policies {
        check_pricing_age(p.issue_age, &format!("policy {}", p.individual_id))?;
    }
    let datasets = partition_by_transition(load_rows(cfg, &policies)?, cfg.spec.n_transitions());
    let modes = &cfg.pricing.modes;
    let needs_best = modes.iter().any(|m| *m != PricingMode::Blind);
    let best = needs_best.then(|| fit(cfg, &policies, &datasets, true)).transpose()?;
    let blind = modes
        .contains(&PricingMode::Blind)
        .then(|| fit(cfg, &policies, &datasets, false))
        .transpose()?;
    let adjusted = match (&best, modes.contains(&PricingMode::FairnessAdjusted)) {
        (Some(b), true) => Some(DiscriminationFreeModel::new(b, policy_level_distribution(&policies)?)?),
        _ => None,
    };
    let models = PricingModels {
        best_estimate: best.as_ref().map(|m| m as &dyn TransitionRates),
        blind: blind.as_ref().map(|m| m as &dyn TransitionRates),
        fairness_adjusted: adjusted.as_ref().map(|m| m as &dyn TransitionRates),
    };
    let quotes = quote_batch(&policies, &models, &cfg.product, modes)?;
    io::write_quotes(ctx.path("quotes.csv"), &quotes)?;
    io::write_plot_data(ctx.path("plot_data.csv"), &plot_points(&quotes, cfg.pricing.window))?;
    info!("{} quotes", quotes.len());
    Ok(())
}

pub fn fair(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let age = cfg.fairness.age;
    check_pricing_age(age as f64, "fairness.age")?;
    let policies = load_policies(cfg)?;
    let rows = load_rows(cfg, &policies)?;
    match cfg.fairness.mode {
        FairMode::Post => fair_post(ctx, &policies, rows, age),
        FairMode::Pre => fair_pre(ctx, &policies, rows, age),
        FairMode::Adv => fair_adv(ctx, &policies, rows, age),
    }
}

fn fair_post(ctx: &Context, policies: &[Policy], rows: Vec<ExposureRow>, age: u32) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let datasets = partition_by_transition(rows, cfg.spec.n_transitions());
    let best = fit(cfg, policies, &datasets, true)?;
    let blind = fit(cfg, policies, &datasets, false)?;
    let adjusted = DiscriminationFreeModel::new(&best, policy_level_distribution(policies)?)?;
    let models = PricingModels {
        best_estimate: Some(&best),
        blind: Some(&blind),
        fairness_adjusted: Some(&adjusted),
    };
    let quotes = quote_batch(&issued_at(policies, age), &models, &cfg.product, &PricingMode::ALL)?;
    io::write_quotes(ctx.path("fair_quotes.csv"), &quotes)?;
    let reports = PricingMode::ALL
        .iter()
        .map(|&mode| {
            let q: Vec<PremiumQuote> = quotes.iter().filter(|q| q.mode == mode).cloned().collect();
            Ok((mode.to_string(), parity(&q, age)?))
        })
        .collect::<CliResult<Vec<_>>>()?;
    io::write_fairness_report(ctx.path("fairness_report.csv"), &reports)?;
    Ok(())
}

/// KS distance of each group's values of `name` to the pooled values.
fn ks_rows(policies: &[Policy], name: &str) -> Vec<Vec<String>> {
    let value = |p: &Policy| match p.covariates.get(name) {
        Some(CovariateValue::Real(v)) => *v,
        _ => f64::NAN,
    };
    let pooled: Vec<f64> = policies.iter().map(value).collect();
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for p in policies {
        groups.entry(&p.sensitive).or_default().push(value(p));
    }
    groups
        .iter()
        .map(|(level, v)| {
            vec![
                name.to_string(),
                level.to_string(),
                v.len().to_string(),
                fmt_f64(ks_distance(v, &pooled)),
            ]
        })
        .collect()
}

fn write_csv(path: PathBuf, header: &[&str], rows: Vec<Vec<String>>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(msfair::Error::from)?;
    w.write_record(header).map_err(msfair::Error::from)?;
    for r in rows {
        w.write_record(&r).map_err(msfair::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

fn fair_pre(ctx: &Context, policies: &[Policy], rows: Vec<ExposureRow>, age: u32) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let names = &cfg.fairness.ot_covariates;
    if names.is_empty() {
        return Err(config("fairness.ot_covariates is empty"));
    }
    let transported = ot_preprocess(policies, names)?;
    let n = cfg.spec.n_transitions();
    let moved = join(rows.clone(), &transported);
    let blind = fit(cfg, policies, &partition_by_transition(rows, n), false)?;
    let pre = fit(cfg, &transported, &partition_by_transition(moved, n), false)?;

    let modes = [PricingMode::Blind];
    let price = |model: &GlmRateModel, ps: &[Policy]| {
        let models = PricingModels {
            blind: Some(model),
            ..Default::default()
        };
        quote_batch(&issued_at(ps, age), &models, &cfg.product, &modes)
    };
    let reports = vec![
        ("blind".to_string(), parity(&price(&blind, policies)?, age)?),
        ("pre".to_string(), parity(&price(&pre, &transported)?, age)?),
    ];
    io::write_fairness_report(ctx.path("fairness_report.csv"), &reports)?;
    io::write_policies(ctx.path("policies_transported.csv"), &transported)?;
    let mut ks = Vec::new();
    for name in names {
        ks.extend(ks_rows(policies, name).into_iter().map(|mut r| {
            r.insert(0, "before".into());
            r
        }));
        ks.extend(ks_rows(&transported, name).into_iter().map(|mut r| {
            r.insert(0, "after".into());
            r
        }));
    }
    write_csv(
        ctx.path("transport_summary.csv"),
        &["stage", "covariate", "sensitive", "n", "ks_to_pooled"],
        ks,
    )
}

fn fair_adv(ctx: &Context, policies: &[Policy], rows: Vec<ExposureRow>, age: u32) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let seed = cfg.seed()?;
    let fc = &cfg.fairness;
    let mut net = fc.net.clone();
    net.covariates = covariates(cfg, policies);
    let datasets = partition_by_transition(rows, cfg.spec.n_transitions());
    let priced = issued_at(policies, age);
    let mut reports = Vec::new();
    let mut summary = Vec::new();
    for &alpha in &fc.alphas {
        let a = fmt_f64(alpha);
        let (model, fits): (Box<dyn TransitionRates>, Vec<(String, AdversarialFit)>) = match fc.variant {
            Variant::Shared => {
                let f = adversarial_fit(&cfg.spec, &datasets, policies, alpha, &net, &fc.train, seed)?;
                (Box::new(f.clone()), vec![("all".into(), f)])
            }
            Variant::Divided => {
                let d = adversarial_fit_divided(&cfg.spec, &datasets, policies, alpha, &net, &fc.train, seed)?;
                let named = d
                    .fits
                    .iter()
                    .enumerate()
                    .map(|(m, f)| (format!("{}", m + 1), f.clone()))
                    .collect();
                (Box::new(d), named)
            }
        };
        let models = PricingModels {
            blind: Some(model.as_ref()),
            ..Default::default()
        };
        let report = parity(
            &quote_batch(&priced, &models, &cfg.product, &[PricingMode::Blind])?,
            age,
        )?;
        for (label, f) in &fits {
            let log_name = match fc.variant {
                Variant::Shared => format!("training_log_alpha_{a}.csv"),
                Variant::Divided => format!("training_log_alpha_{a}_transition_{label}.csv"),
            };
            io::write_training_log(ctx.path(&log_name), &f.log)?;
            summary.push(vec![
                a.clone(),
                label.clone(),
                f.log.len().to_string(),
                fmt_f64(f.probe_accuracy),
                fmt_f64(f.chance),
                fmt_f64(report.gap),
            ]);
            info!(
                "alpha {a} transition {label}: {} epochs, probe accuracy {:.4} (chance {:.4})",
                f.log.len(),
                f.probe_accuracy,
                f.chance
            );
        }
        reports.push((format!("adv_alpha_{a}"), report));
    }
    io::write_fairness_report(ctx.path("fairness_report.csv"), &reports)?;
    write_csv(
        ctx.path("adversarial_summary.csv"),
        &[
            "alpha",
            "transition",
            "epochs",
            "probe_accuracy",
            "chance",
            "parity_gap",
        ],
        summary,
    )
}

pub fn report(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let policies = load_policies(cfg)?;
    let datasets = partition_by_transition(load_rows(cfg, &policies)?, cfg.spec.n_transitions());
    let model = fit(cfg, &policies, &datasets, cfg.model.sensitive)?;
    let policy = match &cfg.individual {
        Some(id) => policies
            .iter()
            .find(|p| &*p.individual_id == id)
            .ok_or_else(|| config(format!("report.individual: no policy `{id}`")))?,
        None => policies.first().ok_or_else(|| config("policy file is empty"))?,
    };
    let query = policy.query(cfg.model.sensitive);
    let from = issue_age_floor(policy.issue_age);
    let to = cfg.product.terminal_age.max(from);
    let matrices = (from..to)
        .map(|a| multi_year_probs(&model, &query, a, a + 1))
        .collect::<msfair::Result<Vec<_>>>()?;
    io::write_probabilities(ctx.path("probabilities.csv"), &cfg.spec, &matrices)?;
    let initial = cfg.spec.state_index(&cfg.product.initial_state)?;
    let occupancy = state_occupancy(&model, &query, initial, from, to)?;
    io::write_occupancy(ctx.path("occupancy.csv"), &cfg.spec, from, &occupancy)?;
    Ok(())
}
