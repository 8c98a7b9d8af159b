//! Adversarial in-processing: a shared encoder `W = f(Z)`, log-linear heads
//! `ln lambda_m = g_m(W, x)` and a softmax adversary `h(W)` that tries to
//! recover the sensitive attribute. The encoder and heads minimise
//! `Loss_pred - alpha * Loss_adv`; the adversary minimises its own
//! cross-entropy `Loss_adv`.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::nn::{cross_entropy, softmax, Adam, Mlp};
use crate::error::{Error, Result};
use crate::model::{CovariateValue, Covariates, ExposureRow, Policy, RateQuery, TransitionRates, TransitionSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Covariates fed to the encoder; empty means every covariate of the
    /// first policy.
    pub covariates: Vec<String>,
    pub hidden: Vec<usize>,
    /// Width of the representation `W`.
    pub representation: usize,
    pub adversary_hidden: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            covariates: Vec::new(),
            hidden: vec![16, 16],
            representation: 8,
            adversary_hidden: vec![16],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_model: f64,
    pub lr_adversary: f64,
    /// Stop after this many epochs without a lower validation total loss.
    pub patience: Option<usize>,
    /// Share of policies held out for early stopping and the accuracy probe.
    pub validation_fraction: f64,
    /// Epochs used to train the fresh probe adversary after fitting.
    pub probe_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            lr_model: 1e-3,
            lr_adversary: 1e-3,
            patience: Some(20),
            validation_fraction: 0.2,
            probe_epochs: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Feature {
    Real { name: String, mean: f64, sd: f64 },
    OneHot { name: String, levels: Vec<String> },
}

/// Standardised reals and one-hot categoricals (first sorted level dropped).
#[derive(Debug, Clone, PartialEq)]
struct Features(Vec<Feature>);

impl Features {
    fn fit(names: &[String], policies: &[&Policy]) -> Result<Self> {
        let mut out = Vec::with_capacity(names.len());
        for name in names {
            let values: Vec<&CovariateValue> = policies
                .iter()
                .map(|p| {
                    p.covariates
                        .get(name)
                        .ok_or_else(|| Error::MissingCovariate(name.clone()))
                })
                .collect::<Result<_>>()?;
            match values.first() {
                Some(CovariateValue::Real(_)) => {
                    let xs: Vec<f64> = values
                        .iter()
                        .map(|v| match v {
                            CovariateValue::Real(x) => Ok(*x),
                            CovariateValue::Level(_) => Err(Error::CovariateKind {
                                covariate: name.clone(),
                                expected: "real",
                            }),
                        })
                        .collect::<Result<_>>()?;
                    let n = xs.len() as f64;
                    let mean = xs.iter().sum::<f64>() / n;
                    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
                    out.push(Feature::Real {
                        name: name.clone(),
                        mean,
                        sd,
                    });
                }
                _ => {
                    let mut levels = BTreeSet::new();
                    for v in &values {
                        match v {
                            CovariateValue::Level(l) => levels.insert(l.clone()),
                            CovariateValue::Real(_) => {
                                return Err(Error::CovariateKind {
                                    covariate: name.clone(),
                                    expected: "categorical",
                                })
                            }
                        };
                    }
                    out.push(Feature::OneHot {
                        name: name.clone(),
                        levels: levels.into_iter().skip(1).collect(),
                    });
                }
            }
        }
        Ok(Self(out))
    }

    fn width(&self) -> usize {
        self.0
            .iter()
            .map(|f| match f {
                Feature::Real { .. } => 1,
                Feature::OneHot { levels, .. } => levels.len(),
            })
            .sum()
    }

    fn encode(&self, cov: &Covariates) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.width());
        for f in &self.0 {
            match f {
                Feature::Real { name, mean, sd } => out.push((cov.real(name)? - mean) / sd),
                Feature::OneHot { name, levels } => match cov.get(name) {
                    Some(CovariateValue::Level(l)) => out.extend(levels.iter().map(|x| f64::from(u8::from(x == l)))),
                    Some(CovariateValue::Real(_)) => {
                        return Err(Error::CovariateKind {
                            covariate: name.clone(),
                            expected: "categorical",
                        })
                    }
                    None => return Err(Error::MissingCovariate(name.clone())),
                },
            }
        }
        Ok(out)
    }
}

/// Encoder, per-transition heads and adversary, with their parameters.
#[derive(Debug, Clone)]
pub struct AdversarialNet {
    spec: TransitionSpec,
    /// Transition predicted by each head.
    heads: Vec<usize>,
    features: Features,
    age_center: f64,
    age_scale: f64,
    levels: Vec<String>,
    alpha: f64,
    encoder: Mlp,
    adversary: Mlp,
    /// Encoder parameters followed by each head's `[w_W.., w_x, bias]`.
    model_params: Vec<f64>,
    adversary_params: Vec<f64>,
}

impl AdversarialNet {
    fn representation(&self) -> usize {
        self.encoder.output()
    }

    fn head_width(&self) -> usize {
        self.representation() + 2
    }

    fn head_offset(&self, h: usize) -> usize {
        self.encoder.n_params() + h * self.head_width()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    /// Transitions predicted by this net, one per head.
    pub fn head_transitions(&self) -> &[usize] {
        &self.heads
    }

    pub fn n_params(&self) -> usize {
        self.model_params.len() + self.adversary_params.len()
    }

    fn scaled_age(&self, age: f64) -> f64 {
        (age - self.age_center) / self.age_scale
    }

    /// Representation `W` for one covariate vector.
    pub fn represent(&self, covariates: &Covariates) -> Result<Vec<f64>> {
        let z = self.features.encode(covariates)?;
        let mut cache = Vec::new();
        self.encoder
            .forward(&self.model_params[..self.encoder.n_params()], &z, &mut cache);
        Ok(cache.pop().unwrap())
    }

    fn head_eta(&self, h: usize, w: &[f64], x: f64) -> f64 {
        let p = &self.model_params[self.head_offset(h)..self.head_offset(h) + self.head_width()];
        let r = w.len();
        p[r + 1] + p[r] * x + p[..r].iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Adversary class probabilities for one representation.
    pub fn adversary_probs(&self, w: &[f64]) -> Vec<f64> {
        let mut cache = Vec::new();
        self.adversary.forward(&self.adversary_params, w, &mut cache);
        softmax(cache.last().unwrap())
    }

    /// All parameters, model first.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.model_params.clone();
        p.extend_from_slice(&self.adversary_params);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let k = self.model_params.len();
        assert_eq!(params.len(), k + self.adversary_params.len());
        self.model_params.copy_from_slice(&params[..k]);
        self.adversary_params.copy_from_slice(&params[k..]);
    }
}

impl TransitionRates for AdversarialNet {
    fn transitions(&self) -> &TransitionSpec {
        &self.spec
    }

    fn rate(&self, m: usize, query: &RateQuery<'_>, age: u32) -> Result<f64> {
        let h = self
            .heads
            .iter()
            .position(|&t| t == m)
            .ok_or_else(|| Error::invalid(format!("net has no head for {}", self.spec.transition_name(m))))?;
        let w = self.represent(query.covariates)?;
        let rate = self.head_eta(h, &w, self.scaled_age(f64::from(age))).exp();
        if !(rate.is_finite() && rate > 0.0) {
            return Err(Error::Numerical(format!("intensity {rate} at age {age}")));
        }
        Ok(rate)
    }

    fn rates_at(&self, query: &RateQuery<'_>, age: u32) -> Result<Vec<f64>> {
        let w = self.represent(query.covariates)?;
        let x = self.scaled_age(f64::from(age));
        let mut out = vec![0.0; self.spec.n_transitions()];
        for m in 0..out.len() {
            let h = self
                .heads
                .iter()
                .position(|&t| t == m)
                .ok_or_else(|| Error::invalid(format!("net has no head for {}", self.spec.transition_name(m))))?;
            out[m] = self.head_eta(h, &w, x).exp();
        }
        Ok(out)
    }

    fn uses_sensitive(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy)]
struct Row {
    head: usize,
    x: f64,
    y: f64,
    log_exposure: f64,
}

/// Policies with their encoded covariates, sensitive class and exposure
/// rows grouped by head.
#[derive(Debug, Clone)]
pub struct AdversarialData {
    ids: Vec<Arc<str>>,
    z: Vec<Vec<f64>>,
    s: Vec<usize>,
    rows: Vec<Vec<Row>>,
}

impl AdversarialData {
    /// Pairs `datasets[h]` (rows of the transition predicted by head `h`)
    /// with `policies`. Only policies with at least one row are kept.
    pub fn new(net: &AdversarialNet, datasets: &[&[ExposureRow]], policies: &[Policy]) -> Result<Self> {
        if datasets.len() != net.heads.len() {
            return Err(Error::invalid(format!(
                "{} datasets for {} heads",
                datasets.len(),
                net.heads.len()
            )));
        }
        let index: HashMap<&str, usize> = policies
            .iter()
            .enumerate()
            .map(|(i, p)| (&*p.individual_id, i))
            .collect();
        let mut rows: Vec<Vec<Row>> = vec![Vec::new(); policies.len()];
        for (h, data) in datasets.iter().enumerate() {
            for r in data.iter() {
                let &k = index
                    .get(&*r.individual_id)
                    .ok_or_else(|| Error::MissingIndividual(r.individual_id.to_string()))?;
                rows[k].push(Row {
                    head: h,
                    x: net.scaled_age(f64::from(r.age)),
                    y: f64::from(r.event),
                    log_exposure: r.exposure.ln(),
                });
            }
        }
        let mut out = Self {
            ids: Vec::new(),
            z: Vec::new(),
            s: Vec::new(),
            rows: Vec::new(),
        };
        for (p, r) in policies.iter().zip(rows) {
            if r.is_empty() {
                continue;
            }
            let class = net
                .levels
                .iter()
                .position(|l| **l == *p.sensitive)
                .ok_or_else(|| Error::LevelMismatch {
                    expected: net.levels.clone(),
                    found: vec![p.sensitive.to_string()],
                })?;
            out.ids.push(p.individual_id.clone());
            out.z.push(net.features.encode(&p.covariates)?);
            out.s.push(class);
            out.rows.push(r);
        }
        Ok(out)
    }

    pub fn n_policies(&self) -> usize {
        self.ids.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// The policies at the given positions.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            z: idx.iter().map(|&i| self.z[i].clone()).collect(),
            s: idx.iter().map(|&i| self.s[i]).collect(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Stats {
    pred_loss: f64,
    adv_loss: f64,
    correct: usize,
    n_rows: usize,
    n_policies: usize,
}

impl Stats {
    fn accuracy(&self) -> f64 {
        self.correct as f64 / self.n_policies.max(1) as f64
    }

    fn total(&self, alpha: f64) -> f64 {
        self.pred_loss - alpha * self.adv_loss
    }
}

/// Mean Poisson loss over the batch's rows and mean adversary
/// cross-entropy over its policies. If `grad_model` is given it receives
/// `d(pred - alpha * adv)/d model`; if `grad_adv` is given it receives
/// `d adv / d adversary`.
fn evaluate(
    net: &AdversarialNet,
    data: &AdversarialData,
    batch: &[usize],
    alpha: f64,
    mut grad_model: Option<&mut [f64]>,
    mut grad_adv: Option<&mut [f64]>,
) -> Stats {
    let n_rows: usize = batch.iter().map(|&k| data.rows[k].len()).sum();
    let n_pol = batch.len();
    let r = net.representation();
    let enc_n = net.encoder.n_params();
    let (enc_params, _) = net.model_params.split_at(enc_n);
    let mut scratch_adv = vec![
        0.0;
        if grad_adv.is_none() {
            net.adversary_params.len()
        } else {
            0
        }
    ];
    let mut enc_cache = Vec::new();
    let mut adv_cache = Vec::new();
    let mut stats = Stats {
        n_rows,
        n_policies: n_pol,
        ..Stats::default()
    };
    let need_model = grad_model.is_some();
    let mut d_w = vec![0.0; r];

    for &k in batch {
        net.encoder.forward(enc_params, &data.z[k], &mut enc_cache);
        let w = enc_cache.last().unwrap().clone();

        net.adversary.forward(&net.adversary_params, &w, &mut adv_cache);
        let logits = adv_cache.last().unwrap();
        let class = data.s[k];
        stats.adv_loss += cross_entropy(logits, class);
        let probs = softmax(logits);
        let predicted = (0..probs.len()).fold(0, |b, j| if probs[j] > probs[b] { j } else { b });
        if predicted == class {
            stats.correct += 1;
        }

        d_w.fill(0.0);
        if need_model || grad_adv.is_some() {
            let mut d_logits = probs;
            d_logits[class] -= 1.0;
            for d in &mut d_logits {
                *d /= n_pol as f64;
            }
            let sink: &mut [f64] = match grad_adv.as_deref_mut() {
                Some(g) => g,
                None => &mut scratch_adv,
            };
            let d_w_adv = net
                .adversary
                .backward(&net.adversary_params, &adv_cache, &d_logits, sink);
            for (a, b) in d_w.iter_mut().zip(&d_w_adv) {
                *a = -alpha * b;
            }
        }

        for row in &data.rows[k] {
            let eta = net.head_eta(row.head, &w, row.x) + row.log_exposure;
            let mu = eta.exp();
            stats.pred_loss += mu - row.y * eta;
            if let Some(g) = grad_model.as_deref_mut() {
                let d_eta = (mu - row.y) / n_rows as f64;
                let off = net.head_offset(row.head);
                let p = &net.model_params[off..off + r + 2];
                for j in 0..r {
                    g[off + j] += d_eta * w[j];
                    d_w[j] += d_eta * p[j];
                }
                g[off + r] += d_eta * row.x;
                g[off + r + 1] += d_eta;
            }
        }

        if let Some(g) = grad_model.as_deref_mut() {
            net.encoder.backward(enc_params, &enc_cache, &d_w, &mut g[..enc_n]);
        }
    }
    stats.pred_loss /= n_rows.max(1) as f64;
    stats.adv_loss /= n_pol.max(1) as f64;
    stats
}

/// Largest relative difference between the analytic gradient of
/// `Loss_pred - alpha * Loss_adv` and central differences with step `eps`,
/// over at most 200 randomly chosen parameters.
pub fn gradient_check(net: &AdversarialNet, data: &AdversarialData, eps: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let batch: Vec<usize> = (0..data.n_policies()).collect();
    let alpha = net.alpha;
    let mut g_model = vec![0.0; net.model_params.len()];
    let mut g_adv = vec![0.0; net.adversary_params.len()];
    evaluate(net, data, &batch, alpha, Some(&mut g_model), Some(&mut g_adv));
    let mut analytic = g_model;
    analytic.extend(g_adv.iter().map(|g| -alpha * g));

    let base = net.params();
    let mut chosen: Vec<usize> = (0..base.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    chosen.shuffle(&mut rng);
    chosen.truncate(200);
    chosen.sort_unstable();

    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in chosen {
        let mut p = base.clone();
        p[i] = base[i] + eps;
        probe.set_params(&p);
        let up = evaluate(&probe, data, &batch, alpha, None, None).total(alpha);
        p[i] = base[i] - eps;
        probe.set_params(&p);
        let down = evaluate(&probe, data, &batch, alpha, None, None).total(alpha);
        let numeric = (up - down) / (2.0 * eps);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// `Loss_pred - alpha * Loss_adv` on the training policies.
    pub loss: f64,
    pub pred_loss: f64,
    pub adv_loss: f64,
    pub adversary_accuracy: f64,
    /// Total loss on held-out policies (NaN without a validation set).
    pub validation_loss: f64,
    pub validation_pred_loss: f64,
}

#[derive(Debug, Clone)]
pub struct AdversarialFit {
    pub net: AdversarialNet,
    pub log: Vec<EpochLog>,
    /// Accuracy on held-out policies of a fresh adversary trained on the
    /// final, frozen representation.
    pub probe_accuracy: f64,
    /// Majority-class share among the same policies.
    pub chance: f64,
}

impl TransitionRates for AdversarialFit {
    fn transitions(&self) -> &TransitionSpec {
        self.net.transitions()
    }

    fn rate(&self, m: usize, query: &RateQuery<'_>, age: u32) -> Result<f64> {
        self.net.rate(m, query, age)
    }

    fn rates_at(&self, query: &RateQuery<'_>, age: u32) -> Result<Vec<f64>> {
        self.net.rates_at(query, age)
    }

    fn uses_sensitive(&self) -> bool {
        false
    }
}

fn build_net(
    spec: &TransitionSpec,
    heads: Vec<usize>,
    datasets: &[&[ExposureRow]],
    policies: &[Policy],
    alpha: f64,
    config: &NetConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdversarialNet> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha must be nonnegative, got {alpha}")));
    }
    if config.representation == 0 {
        return Err(Error::invalid("representation width must be positive"));
    }
    let present: BTreeSet<&str> = datasets
        .iter()
        .flat_map(|d| d.iter().map(|r| &*r.individual_id))
        .collect();
    let used: Vec<&Policy> = policies
        .iter()
        .filter(|p| present.contains(&*p.individual_id))
        .collect();
    if used.is_empty() {
        return Err(Error::EmptySample);
    }
    let names = if config.covariates.is_empty() {
        used[0].covariates.names().map(str::to_string).collect()
    } else {
        config.covariates.clone()
    };
    let features = Features::fit(&names, &used)?;
    let levels: Vec<String> = used
        .iter()
        .map(|p| p.sensitive.to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let ages: Vec<f64> = datasets
        .iter()
        .flat_map(|d| d.iter().map(|r| f64::from(r.age)))
        .collect();
    let n = ages.len() as f64;
    let age_center = ages.iter().sum::<f64>() / n;
    let sd = (ages.iter().map(|a| (a - age_center).powi(2)).sum::<f64>() / n).sqrt();
    let age_scale = if sd > 0.0 { sd } else { 1.0 };

    let mut sizes = vec![features.width()];
    sizes.extend(&config.hidden);
    sizes.push(config.representation);
    let encoder = Mlp::new(sizes);
    let mut adv_sizes = vec![config.representation];
    adv_sizes.extend(&config.adversary_hidden);
    adv_sizes.push(levels.len());
    let adversary = Mlp::new(adv_sizes);

    let r = config.representation;
    let head_w = r + 2;
    let mut model_params = vec![0.0; encoder.n_params() + heads.len() * head_w];
    encoder.init(&mut model_params[..encoder.n_params()], rng);
    let limit = (6.0 / (r + 2) as f64).sqrt();
    for (h, data) in datasets.iter().enumerate() {
        let off = encoder.n_params() + h * head_w;
        for p in &mut model_params[off..off + r + 1] {
            *p = rng.random_range(-limit..limit) * 0.1;
        }
        let events: f64 = data.iter().map(|r| f64::from(r.event)).sum();
        let exposure: f64 = data.iter().map(|r| r.exposure).sum();
        model_params[off + r + 1] = if events > 0.0 && exposure > 0.0 {
            (events / exposure).ln()
        } else {
            -5.0
        };
    }
    let mut adversary_params = vec![0.0; adversary.n_params()];
    adversary.init(&mut adversary_params, rng);

    Ok(AdversarialNet {
        spec: spec.clone(),
        heads,
        features,
        age_center,
        age_scale,
        levels,
        alpha,
        encoder,
        adversary,
        model_params,
        adversary_params,
    })
}

fn check_finite(stats: &Stats, epoch: usize) -> Result<()> {
    if stats.pred_loss.is_finite() && stats.adv_loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { epoch })
    }
}

fn train(
    spec: &TransitionSpec,
    heads: Vec<usize>,
    datasets: &[&[ExposureRow]],
    policies: &[Policy],
    alpha: f64,
    net_config: &NetConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<AdversarialFit> {
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(Error::invalid("validation fraction must lie in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = build_net(spec, heads, datasets, policies, alpha, net_config, &mut rng)?;
    let data = AdversarialData::new(&net, datasets, policies)?;

    let mut order: Vec<usize> = (0..data.n_policies()).collect();
    order.shuffle(&mut rng);
    let n_val = (config.validation_fraction * order.len() as f64).round() as usize;
    let (val, train_idx) = order.split_at(n_val);
    let mut val = val.to_vec();
    val.sort_unstable();
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    if train_idx.is_empty() {
        return Err(Error::EmptySample);
    }

    let mut opt_model = Adam::new(net.model_params.len(), config.lr_model);
    let mut opt_adv = Adam::new(net.adversary_params.len(), config.lr_adversary);
    let mut g_model = vec![0.0; net.model_params.len()];
    let mut g_adv = vec![0.0; net.adversary_params.len()];
    let mut log = Vec::with_capacity(config.epochs);
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut shuffled = train_idx.clone();

    for epoch in 1..=config.epochs {
        shuffled.shuffle(&mut rng);
        for batch in shuffled.chunks(config.batch_size) {
            g_model.fill(0.0);
            let s = evaluate(&net, &data, batch, alpha, Some(&mut g_model), None);
            check_finite(&s, epoch)?;
            let mut params = std::mem::take(&mut net.model_params);
            opt_model.step(&mut params, &g_model);
            net.model_params = params;

            g_adv.fill(0.0);
            evaluate(&net, &data, batch, alpha, None, Some(&mut g_adv));
            let mut params = std::mem::take(&mut net.adversary_params);
            opt_adv.step(&mut params, &g_adv);
            net.adversary_params = params;
        }

        let s = evaluate(&net, &data, &train_idx, alpha, None, None);
        check_finite(&s, epoch)?;
        let (v, v_pred) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let sv = evaluate(&net, &data, &val, alpha, None, None);
            (sv.total(alpha), sv.pred_loss)
        };
        log.push(EpochLog {
            epoch,
            loss: s.total(alpha),
            pred_loss: s.pred_loss,
            adv_loss: s.adv_loss,
            adversary_accuracy: s.accuracy(),
            validation_loss: v,
            validation_pred_loss: v_pred,
        });
        log::debug!(
            "epoch {epoch}: loss {:.6} pred {:.6} adv {:.6} acc {:.4}",
            s.total(alpha),
            s.pred_loss,
            s.adv_loss,
            s.accuracy()
        );
        if let (Some(patience), false) = (config.patience, v.is_nan()) {
            if v < best {
                best = v;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }

    let eval_idx = if val.is_empty() { &train_idx } else { &val };
    let probe_accuracy = probe(&net, &data, &train_idx, eval_idx, config, &mut rng);
    let mut counts = vec![0usize; net.levels.len()];
    for &k in eval_idx.iter() {
        counts[data.s[k]] += 1;
    }
    let chance = *counts.iter().max().unwrap() as f64 / eval_idx.len() as f64;
    Ok(AdversarialFit {
        net,
        log,
        probe_accuracy,
        chance,
    })
}

/// Trains a fresh adversary on the frozen representation of `train_idx`
/// and returns its accuracy on `eval_idx`.
fn probe(
    net: &AdversarialNet,
    data: &AdversarialData,
    train_idx: &[usize],
    eval_idx: &[usize],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut probe_net = net.clone();
    probe_net.adversary.init(&mut probe_net.adversary_params, rng);
    let mut opt = Adam::new(probe_net.adversary_params.len(), 1e-2);
    let mut g = vec![0.0; probe_net.adversary_params.len()];
    let mut shuffled = train_idx.to_vec();
    for _ in 0..config.probe_epochs {
        shuffled.shuffle(rng);
        for batch in shuffled.chunks(config.batch_size) {
            g.fill(0.0);
            evaluate(&probe_net, data, batch, 0.0, None, Some(&mut g));
            opt.step(&mut probe_net.adversary_params, &g);
        }
    }
    evaluate(&probe_net, data, eval_idx, 0.0, None, None).accuracy()
}

/// One shared encoder for all transitions; `datasets[m]` holds the rows of
/// transition `m`.
pub fn adversarial_fit(
    spec: &TransitionSpec,
    datasets: &[Vec<ExposureRow>],
    policies: &[Policy],
    alpha: f64,
    net_config: &NetConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<AdversarialFit> {
    if datasets.len() != spec.n_transitions() {
        return Err(Error::invalid(format!(
            "{} datasets for {} transitions",
            datasets.len(),
            spec.n_transitions()
        )));
    }
    let refs: Vec<&[ExposureRow]> = datasets.iter().map(Vec::as_slice).collect();
    train(
        spec,
        (0..spec.n_transitions()).collect(),
        &refs,
        policies,
        alpha,
        net_config,
        config,
        seed,
    )
}

/// Independent encoder, head and adversary per transition.
#[derive(Debug, Clone)]
pub struct DividedFit {
    pub fits: Vec<AdversarialFit>,
}

impl TransitionRates for DividedFit {
    fn transitions(&self) -> &TransitionSpec {
        self.fits[0].net.transitions()
    }

    fn rate(&self, m: usize, query: &RateQuery<'_>, age: u32) -> Result<f64> {
        self.fits[m].net.rate(m, query, age)
    }

    fn uses_sensitive(&self) -> bool {
        false
    }
}

/// Fits every transition separately, in parallel, each with `seed`.
pub fn adversarial_fit_divided(
    spec: &TransitionSpec,
    datasets: &[Vec<ExposureRow>],
    policies: &[Policy],
    alpha: f64,
    net_config: &NetConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<DividedFit> {
    if datasets.len() != spec.n_transitions() {
        return Err(Error::invalid(format!(
            "{} datasets for {} transitions",
            datasets.len(),
            spec.n_transitions()
        )));
    }
    let fits = datasets
        .par_iter()
        .enumerate()
        .map(|(m, rows)| {
            train(
                spec,
                vec![m],
                &[rows.as_slice()],
                policies,
                alpha,
                net_config,
                config,
                seed,
            )
            .map_err(|e| Error::InTransition {
                transition: spec.transition_name(m),
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    Ok(DividedFit { fits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Covariates;

    fn toy(n: usize) -> (TransitionSpec, Vec<Vec<ExposureRow>>, Vec<Policy>) {
        let spec = TransitionSpec::two_state();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut policies = Vec::new();
        let mut rows = Vec::new();
        for i in 0..n {
            let s = if i % 3 == 0 { "B" } else { "A" };
            let z: f64 = rng.random_range(-1.0..1.0) + if s == "B" { 0.5 } else { 0.0 };
            let cov = Arc::new(
                Covariates::default()
                    .with_real("z", z)
                    .with_level("smoker", if i % 2 == 0 { "no" } else { "yes" }),
            );
            let id: Arc<str> = Arc::from(i.to_string());
            policies.push(Policy {
                individual_id: id.clone(),
                covariates: cov.clone(),
                issue_age: 60.0,
                sensitive: Arc::from(s),
            });
            for age in 60..63 {
                rows.push(ExposureRow {
                    individual_id: id.clone(),
                    transition: 0,
                    age,
                    event: u32::from(rng.random_bool(0.1)),
                    exposure: rng.random_range(0.2..1.0),
                    covariates: cov.clone(),
                    sensitive: None,
                });
            }
        }
        (spec, vec![rows], policies)
    }

    fn untrained(alpha: f64, hidden: Vec<usize>) -> (AdversarialNet, AdversarialData) {
        let (spec, data, policies) = toy(10);
        let cfg = NetConfig {
            hidden,
            representation: 3,
            ..NetConfig::default()
        };
        let refs: Vec<&[ExposureRow]> = data.iter().map(Vec::as_slice).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = build_net(&spec, vec![0], &refs, &policies, alpha, &cfg, &mut rng).unwrap();
        let d = AdversarialData::new(&net, &refs, &policies).unwrap();
        (net, d)
    }

    #[test]
    fn gradients_match_differences() {
        for hidden in [vec![], vec![6, 5]] {
            let (net, data) = untrained(1.5, hidden);
            let err = gradient_check(&net, &data, 1e-5).unwrap();
            assert!(err < 1e-5, "max relative error {err}");
        }
    }

    #[test]
    fn zero_network_gradients() {
        let (mut net, data) = untrained(1.0, vec![4]);
        let zeros = vec![0.0; net.n_params()];
        net.set_params(&zeros);
        assert!(gradient_check(&net, &data, 1e-5).unwrap() < 1e-5);
    }

    #[test]
    fn adversary_gradient_linear_in_alpha() {
        let (net, data) = untrained(1.0, vec![4]);
        let batch: Vec<usize> = (0..data.n_policies()).collect();
        let grad = |alpha: f64| {
            let mut g = vec![0.0; net.model_params.len()];
            evaluate(&net, &data, &batch, alpha, Some(&mut g), None);
            g
        };
        let (g0, g1, g3) = (grad(0.0), grad(1.0), grad(3.0));
        for i in 0..g0.len() {
            let adv1 = g1[i] - g0[i];
            let adv3 = g3[i] - g0[i];
            assert!((adv3 - 3.0 * adv1).abs() <= 1e-6 * adv3.abs().max(1e-12));
        }
    }

    #[test]
    fn step_outside_range_rejected() {
        let (net, data) = untrained(1.0, vec![]);
        assert!(gradient_check(&net, &data, 1e-2).is_err());
    }

    #[test]
    fn fit_is_deterministic() {
        let (spec, data, policies) = toy(60);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 16,
            probe_epochs: 5,
            ..TrainConfig::default()
        };
        let a = adversarial_fit(&spec, &data, &policies, 1.0, &NetConfig::default(), &cfg, 3).unwrap();
        let b = adversarial_fit(&spec, &data, &policies, 1.0, &NetConfig::default(), &cfg, 3).unwrap();
        assert_eq!(a.net.params(), b.net.params());
        assert_eq!(a.log, b.log);
        assert!(a.net.params().iter().all(|p| p.is_finite()));
        let probs = a
            .net
            .adversary_probs(&a.net.represent(&policies[0].covariates).unwrap());
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn divided_single_transition_matches_shared() {
        let (spec, data, policies) = toy(40);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            probe_epochs: 2,
            ..TrainConfig::default()
        };
        let shared = adversarial_fit(&spec, &data, &policies, 0.0, &NetConfig::default(), &cfg, 9).unwrap();
        let divided = adversarial_fit_divided(&spec, &data, &policies, 0.0, &NetConfig::default(), &cfg, 9).unwrap();
        assert_eq!(shared.net.params(), divided.fits[0].net.params());
    }

    #[test]
    fn negative_alpha_rejected() {
        let (spec, data, policies) = toy(5);
        assert!(adversarial_fit(
            &spec,
            &data,
            &policies,
            -1.0,
            &NetConfig::default(),
            &TrainConfig::default(),
            1
        )
        .is_err());
    }
}
