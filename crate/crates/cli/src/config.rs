//! `key = value` run configuration with `[section]` headers.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use msfair::fairness::{NetConfig, TrainConfig};
use msfair::glm::AgeTerm;
use msfair::model::{BenefitSchedule, ProductSpec, TransitionSpec};
use msfair::pricing::PricingMode;
use msfair::synthetic::{CensoringMode, ScenarioSpec};

use crate::error::{config, CliError, CliResult};

#[derive(Debug, Clone, Default)]
pub struct Paths {
    pub trajectories: Option<PathBuf>,
    pub policies: Option<PathBuf>,
    pub exposure: Option<PathBuf>,
    /// Policy columns read as categorical even when numeric.
    pub categorical: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// `None` uses every policy covariate.
    pub covariates: Option<Vec<String>>,
    pub age: AgeTerm,
    pub sensitive: bool,
    /// Covariates scored by likelihood contribution; `None` uses the model's.
    pub contributions: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Proxied,
    CovariatesOnly,
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub n: usize,
    pub preset: Preset,
    pub censoring: CensoringMode,
    pub study_years: Option<f64>,
    pub issue_age: Option<(f64, f64)>,
    pub sensitive_probs: Option<Vec<f64>>,
    /// 1-based transition index to coefficients.
    pub coefficients: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct PricingConfig {
    pub modes: Vec<PricingMode>,
    pub window: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FairMode {
    Post,
    Pre,
    Adv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Shared,
    Divided,
}

#[derive(Debug, Clone)]
pub struct FairnessConfig {
    pub mode: FairMode,
    pub age: u32,
    pub ot_covariates: Vec<String>,
    pub alphas: Vec<f64>,
    pub variant: Variant,
    pub net: NetConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub paths: Paths,
    pub spec: TransitionSpec,
    pub model: ModelConfig,
    pub product: ProductSpec,
    pub scenario: ScenarioConfig,
    pub pricing: PricingConfig,
    pub fairness: FairnessConfig,
    /// Individual whose probabilities `report` writes; default the first policy.
    pub individual: Option<String>,
}

/// Issue ages accepted for pricing.
pub const PRICING_AGES: (f64, f64) = (50.0, 80.0);

/// Entries keyed by (section, key); whatever is left after parsing is unknown.
struct Entries(BTreeMap<(String, String), String>);

impl Entries {
    fn take(&mut self, section: &str, key: &str) -> Option<String> {
        self.0.remove(&(section.to_string(), key.to_string()))
    }

    fn parse<T: FromStr>(&mut self, section: &str, key: &str) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        self.take(section, key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| config(format!("{}: `{v}`: {e}", qualified(section, key))))
            })
            .transpose()
    }

    fn list<T: FromStr>(&mut self, section: &str, key: &str) -> CliResult<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        self.take(section, key)
            .map(|v| {
                split_list(&v)
                    .into_iter()
                    .map(|item| {
                        item.parse::<T>()
                            .map_err(|e| config(format!("{}: `{item}`: {e}", qualified(section, key))))
                    })
                    .collect()
            })
            .transpose()
    }

    fn path(&mut self, section: &str, key: &str, base: &Path) -> Option<PathBuf> {
        self.take(section, key).map(|v| base.join(v))
    }
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

fn split_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "proxied" => Ok(Preset::Proxied),
            "covariates_only" => Ok(Preset::CovariatesOnly),
            _ => Err("expected proxied or covariates_only".into()),
        }
    }
}

impl FromStr for FairMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "post" => Ok(FairMode::Post),
            "pre" => Ok(FairMode::Pre),
            "adv" | "adversarial" => Ok(FairMode::Adv),
            _ => Err("expected post, pre or adv".into()),
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shared" => Ok(Variant::Shared),
            "divided" => Ok(Variant::Divided),
            _ => Err("expected shared or divided".into()),
        }
    }
}

fn age_term(s: &str) -> CliResult<AgeTerm> {
    match s {
        "linear" => Ok(AgeTerm::Linear),
        "factor" => Ok(AgeTerm::Factor),
        "none" => Ok(AgeTerm::None),
        _ => Err(config(format!("model.age: `{s}`: expected linear, factor or none"))),
    }
}

fn transition_spec(e: &mut Entries) -> CliResult<TransitionSpec> {
    let states = e.list::<String>("model", "states")?;
    let transitions = e.take("model", "transitions");
    match (states, transitions) {
        (None, None) => Ok(TransitionSpec::healthy_disabled_dead()),
        (Some(states), Some(t)) => {
            let pairs = split_list(&t)
                .into_iter()
                .map(|item| {
                    item.split_once("->")
                        .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                        .ok_or_else(|| config(format!("model.transitions: `{item}` is not FROM->TO")))
                })
                .collect::<CliResult<Vec<_>>>()?;
            Ok(TransitionSpec::new(&states, &pairs)?)
        }
        _ => Err(config("model.states and model.transitions must be given together")),
    }
}

fn product(e: &mut Entries) -> CliResult<ProductSpec> {
    let mut p = ProductSpec::ltci();
    const S: &str = "product";
    if let Some(v) = e.list("product", "premium_states")? {
        p.premium_states = v;
    }
    if let Some(v) = e.list("product", "benefit_states")? {
        p.benefit_states = v;
    }
    if let Some(v) = e.list::<f64>(S, "benefit")? {
        p.benefit = match v.as_slice() {
            [b] => BenefitSchedule::Level(*b),
            _ => BenefitSchedule::ByDuration(v),
        };
    }
    p.death_benefit = e.parse(S, "death_benefit")?;
    if let Some(v) = e.take(S, "death_state") {
        p.death_state = v;
    }
    let interest: Option<f64> = e.parse(S, "interest")?;
    let discount: Option<f64> = e.parse(S, "discount")?;
    match (interest, discount) {
        (Some(_), Some(_)) => return Err(config("product.interest and product.discount are exclusive")),
        (Some(i), None) => {
            if i <= -1.0 {
                return Err(config(format!("product.interest: {i} must exceed -1")));
            }
            p.discount = 1.0 / (1.0 + i);
        }
        (None, Some(v)) => p.discount = v,
        (None, None) => {}
    }
    if let Some(v) = e.parse(S, "terminal_age")? {
        p.terminal_age = v;
    }
    if let Some(v) = e.take(S, "initial_state") {
        p.initial_state = v;
    }
    Ok(p)
}

fn scenario(e: &mut Entries) -> CliResult<ScenarioConfig> {
    const S: &str = "scenario";
    let n = e.parse(S, "n")?.unwrap_or(1000);
    let preset = e.parse(S, "preset")?.unwrap_or(Preset::Proxied);
    let censoring = e.parse(S, "censoring")?.unwrap_or(CensoringMode::Exact);
    let study_years = e.parse(S, "study_years")?;
    let lo: Option<f64> = e.parse(S, "issue_age_min")?;
    let hi: Option<f64> = e.parse(S, "issue_age_max")?;
    let issue_age = match (lo, hi) {
        (None, None) => None,
        (Some(lo), Some(hi)) => Some((lo, hi)),
        _ => {
            return Err(config(
                "scenario.issue_age_min and scenario.issue_age_max must be given together",
            ))
        }
    };
    let sensitive_probs = e.list(S, "sensitive_probs")?;
    let keys: Vec<String> =
        e.0.keys()
            .filter(|(s, k)| s == S && k.starts_with("coefficients."))
            .map(|(_, k)| k.clone())
            .collect();
    let mut coefficients = BTreeMap::new();
    for key in keys {
        let m: usize = key["coefficients.".len()..]
            .parse()
            .map_err(|_| config(format!("scenario.{key}: expected coefficients.<transition number>")))?;
        coefficients.insert(m, e.list(S, &key)?.unwrap_or_default());
    }
    Ok(ScenarioConfig {
        n,
        preset,
        censoring,
        study_years,
        issue_age,
        sensitive_probs,
        coefficients,
    })
}

fn pricing(e: &mut Entries) -> CliResult<PricingConfig> {
    let modes = e.list("pricing", "modes")?.unwrap_or_else(|| PricingMode::ALL.to_vec());
    if modes.is_empty() {
        return Err(config("pricing.modes is empty"));
    }
    let window: usize = e.parse("pricing", "window")?.unwrap_or(5);
    if window == 0 || window.is_multiple_of(2) {
        return Err(config(format!(
            "pricing.window: {window} must be a positive odd number"
        )));
    }
    Ok(PricingConfig { modes, window })
}

fn fairness(e: &mut Entries) -> CliResult<FairnessConfig> {
    const S: &str = "fairness";
    let mut net = NetConfig::default();
    let mut train = TrainConfig::default();
    if let Some(v) = e.list(S, "hidden")? {
        net.hidden = v;
    }
    if let Some(v) = e.parse(S, "representation")? {
        net.representation = v;
    }
    if let Some(v) = e.list(S, "adversary_hidden")? {
        net.adversary_hidden = v;
    }
    if let Some(v) = e.parse(S, "epochs")? {
        train.epochs = v;
    }
    if let Some(v) = e.parse(S, "batch_size")? {
        train.batch_size = v;
    }
    if let Some(v) = e.parse(S, "lr_model")? {
        train.lr_model = v;
    }
    if let Some(v) = e.parse(S, "lr_adversary")? {
        train.lr_adversary = v;
    }
    if let Some(v) = e.parse::<usize>(S, "patience")? {
        train.patience = (v > 0).then_some(v);
    }
    if let Some(v) = e.parse(S, "validation_fraction")? {
        train.validation_fraction = v;
    }
    if let Some(v) = e.parse(S, "probe_epochs")? {
        train.probe_epochs = v;
    }
    let alphas: Vec<f64> = e.list(S, "alpha")?.unwrap_or_else(|| vec![0.0, 2.0]);
    if alphas.is_empty() {
        return Err(config("fairness.alpha is empty"));
    }
    if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(config(format!("fairness.alpha: {a} must be nonnegative")));
    }
    Ok(FairnessConfig {
        mode: e.parse(S, "mode")?.unwrap_or(FairMode::Post),
        age: e.parse(S, "age")?.unwrap_or(65),
        ot_covariates: e.list(S, "ot_covariates")?.unwrap_or_default(),
        alphas,
        variant: e.parse(S, "variant")?.unwrap_or(Variant::Shared),
        net,
        train,
    })
}

impl RunConfig {
    /// Parses `text`; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| config(e.to_string()))?;
        let mut map = BTreeMap::new();
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                let key = (section.unwrap_or("").to_string(), k.to_string());
                if map.insert(key, v.trim().to_string()).is_some() {
                    return Err(config(format!(
                        "duplicate key `{}`",
                        qualified(section.unwrap_or(""), k)
                    )));
                }
            }
        }
        let mut e = Entries(map);

        let seed = e.parse("", "seed")?;
        let threads = e.parse("", "threads")?;
        let paths = Paths {
            trajectories: e.path("paths", "trajectories", base),
            policies: e.path("paths", "policies", base),
            exposure: e.path("paths", "exposure", base),
            categorical: e.list("paths", "categorical")?.unwrap_or_default(),
        };
        let spec = transition_spec(&mut e)?;
        let model = ModelConfig {
            covariates: e.list("model", "covariates")?,
            age: e.take("model", "age").map_or(Ok(AgeTerm::Linear), |s| age_term(&s))?,
            sensitive: e.parse("model", "sensitive")?.unwrap_or(false),
            contributions: e.list("model", "contributions")?,
        };
        let product = product(&mut e)?;
        product.validate(&spec)?;
        let scenario = scenario(&mut e)?;
        let pricing = pricing(&mut e)?;
        let fairness = fairness(&mut e)?;
        let individual = e.take("report", "individual");

        if let Some(((section, key), _)) = e.0.iter().next() {
            return Err(config(format!("unknown key `{}`", qualified(section, key))));
        }
        Ok(Self {
            seed,
            threads,
            paths,
            spec,
            model,
            product,
            scenario,
            pricing,
            fairness,
            individual,
        })
    }

    /// Reads the file and checks every referenced input exists.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingFile(path.display().to_string()),
            _ => CliError::Io(e),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Every input file named under `[paths]` must exist.
    pub fn check_inputs(&self) -> CliResult<()> {
        for p in [&self.paths.trajectories, &self.paths.policies, &self.paths.exposure]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(CliError::MissingFile(p.display().to_string()));
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> CliResult<u64> {
        self.seed.ok_or_else(|| config("missing key `seed`"))
    }

    /// The synthetic scenario with every override applied.
    pub fn scenario_spec(&self) -> CliResult<ScenarioSpec> {
        let sc = &self.scenario;
        if sc.n == 0 {
            return Err(config("scenario.n must be positive"));
        }
        let seed = self.seed()?;
        let mut spec = match sc.preset {
            Preset::Proxied => ScenarioSpec::proxied(sc.n, seed),
            Preset::CovariatesOnly => ScenarioSpec::covariates_only(sc.n, seed),
        };
        spec.censoring = sc.censoring;
        if let Some(y) = sc.study_years {
            spec.study_years = y;
        }
        if let Some(a) = sc.issue_age {
            spec.issue_age = a;
        }
        if let Some(p) = &sc.sensitive_probs {
            spec.sensitive_probs = p.clone();
        }
        for (&m, c) in &sc.coefficients {
            if m == 0 || m > spec.coefficients.len() {
                return Err(config(format!(
                    "scenario.coefficients.{m}: transition outside 1..={}",
                    spec.coefficients.len()
                )));
            }
            spec.coefficients[m - 1] = c.clone();
        }
        spec.validate(&self.spec)?;
        Ok(spec)
    }
}
