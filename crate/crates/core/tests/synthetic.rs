use msfair::model::{constant_rates, CovariateValue, Covariates, Policy, Terminal, TransitionSpec};
use msfair::synthetic::{generate_population, generate_study, simulate_study, CensoringMode, ScenarioSpec};

fn real(p: &Policy, name: &str) -> f64 {
    p.covariates.real(name).unwrap()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn sensitive_shares_match_probabilities() {
    let n = 20000;
    let spec = ScenarioSpec::proxied(n, 31);
    let policies = generate_population(&spec).unwrap();
    for (level, p) in spec.sensitive_levels.iter().zip(&spec.sensitive_probs) {
        let share = policies.iter().filter(|q| &*q.sensitive == level).count() as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((share - p).abs() < 4.0 * se, "{level}: {share} vs {p}");
    }
}

#[test]
fn only_x1_proxies_the_group() {
    let policies = generate_population(&ScenarioSpec::proxied(20000, 32)).unwrap();
    let group = |l: &'static str| policies.iter().filter(move |p| &*p.sensitive == l);
    let x1_a = mean(group("A").map(|p| real(p, "x1")));
    let x1_b = mean(group("B").map(|p| real(p, "x1")));
    assert!((x1_b - x1_a - 1.0).abs() < 0.1);
    for l in ["A", "B", "C"] {
        let n = group(l).count() as f64;
        let x2 = mean(group(l).map(|p| real(p, "x2")));
        assert!(x2.abs() < 4.0 / n.sqrt(), "x2 mean {x2} in {l}");
        let smokers = group(l)
            .filter(|p| p.covariates.get("smoker") == Some(&CovariateValue::Level("yes".into())))
            .count() as f64
            / n;
        assert!(
            (smokers - 0.2).abs() < 4.0 * (0.16 / n).sqrt(),
            "smoker share {smokers} in {l}"
        );
    }
    for p in &policies {
        assert!((50.0..80.0).contains(&p.issue_age));
    }
}

#[test]
fn generation_is_reproducible() {
    let spec = ScenarioSpec::proxied(500, 33);
    let transitions = TransitionSpec::healthy_disabled_dead();
    let a = generate_population(&spec).unwrap();
    let b = generate_population(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        generate_study(&spec, &transitions, &a).unwrap(),
        generate_study(&spec, &transitions, &b).unwrap()
    );
    let other = generate_population(&ScenarioSpec::proxied(500, 34)).unwrap();
    assert_ne!(a, other);
}

#[test]
fn prefix_of_a_larger_population_is_unchanged() {
    let small = generate_population(&ScenarioSpec::proxied(100, 35)).unwrap();
    let large = generate_population(&ScenarioSpec::proxied(300, 35)).unwrap();
    assert_eq!(small[..], large[..100]);
}

#[test]
fn constant_hazard_gives_exponential_lifetimes() {
    let rate = 0.1;
    let model = constant_rates(TransitionSpec::two_state(), vec![rate]);
    let n = 20000;
    let policies: Vec<Policy> = (0..n)
        .map(|i| Policy::new(&i.to_string(), Covariates::default(), 60.0, "A").unwrap())
        .collect();
    let paths = simulate_study(&model, &policies, "Alive", 200.0, CensoringMode::Exact, 36).unwrap();
    let lifetimes: Vec<f64> = paths
        .iter()
        .map(|t| {
            assert!(matches!(t.terminal, Terminal::State(_)));
            t.sojourns[0].end_age - 60.0
        })
        .collect();
    let m = mean(lifetimes.iter().copied());
    // sd of an exponential equals its mean
    assert!(
        (m - 1.0 / rate).abs() < 4.0 / rate / (n as f64).sqrt(),
        "mean lifetime {m}"
    );
    let survive_5 = lifetimes.iter().filter(|&&l| l > 5.0).count() as f64 / n as f64;
    assert!((survive_5 - (-0.5f64).exp()).abs() < 0.015);
}

#[test]
fn biennial_changes_sit_at_wave_midpoints() {
    let mut spec = ScenarioSpec::proxied(2000, 37);
    spec.censoring = CensoringMode::BiennialMidpoint;
    let transitions = TransitionSpec::healthy_disabled_dead();
    let policies = generate_population(&spec).unwrap();
    let paths = generate_study(&spec, &transitions, &policies).unwrap();
    let mut changes = 0;
    for (t, p) in paths.iter().zip(&policies) {
        t.validate(&transitions).unwrap();
        for s in &t.sojourns[1..] {
            let offset = s.start_age - p.issue_age;
            assert!(((offset - 1.0) / 2.0 - ((offset - 1.0) / 2.0).round()).abs() < 1e-9);
            changes += 1;
        }
    }
    assert!(changes > 0);
}
