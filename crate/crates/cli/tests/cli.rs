use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn msfair(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msfair"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

fn table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

const STUDY: &str = "[paths]\ntrajectories = trajectories.csv\npolicies = policies.csv\n";

/// A simulated study of `n` individuals in a fresh directory.
fn study(n: usize, seed: u64) -> TempDir {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "sim.ini", &format!("seed = {seed}\n[scenario]\nn = {n}\n"));
    let o = msfair(&["simulate", "--config", "sim.ini", "--out", "."], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn simulate_writes_n_policies() {
    let dir = study(300, 5);
    let (_, rows) = table(&dir.path().join("policies.csv"));
    assert_eq!(rows.len(), 300);
    let (header, rows) = table(&dir.path().join("trajectories.csv"));
    assert_eq!(
        header[..5],
        [
            "individual_id",
            "initial_state",
            "ending_state",
            "starting_age",
            "ending_age"
        ]
    );
    assert!(rows.len() >= 300);
}

#[test]
fn simulate_without_seed_names_key() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "sim.ini", "[scenario]\nn = 10\n");
    let o = msfair(&["simulate", "--config", "sim.ini"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`seed`"));
    let o = msfair(
        &["simulate", "--config", "sim.ini", "--seed", "4", "--out", "x"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn simulate_zero_individuals_rejected() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "sim.ini", "seed = 1\n[scenario]\nn = 0\n");
    assert_eq!(
        msfair(&["simulate", "--config", "sim.ini"], dir.path()).status.code(),
        Some(2)
    );
}

#[test]
fn unknown_key_and_missing_file() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "a.ini", "[model]\nstate = x\n");
    let o = msfair(&["fit", "--config", "a.ini"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.state"));
    write(dir.path(), "b.ini", "[paths]\npolicies = absent.csv\n");
    assert_eq!(msfair(&["fit", "--config", "b.ini"], dir.path()).status.code(), Some(3));
    assert_eq!(
        msfair(&["fit", "--config", "none.ini"], dir.path()).status.code(),
        Some(3)
    );
}

#[test]
fn one_config_drives_simulate_then_fit() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "a.ini",
        "seed = 3\n[paths]\ntrajectories = trajectories.csv\npolicies = policies.csv\ncategorical = smoker\n[scenario]\nn = 300\n",
    );
    let o = msfair(&["simulate", "--config", "a.ini"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = msfair(&["fit", "--config", "a.ini", "--out", "fit"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("fit/coefficients.csv").exists());
}

#[test]
fn transform_matches_golden() {
    let dir = TempDir::new().unwrap();
    let o = msfair(
        &[
            "transform",
            "--config",
            fixture("worked_example.ini").to_str().unwrap(),
            "--out",
            ".",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let got = fs::read(dir.path().join("exposure.csv")).unwrap();
    let want = fs::read(fixture("worked_example_exposure.csv")).unwrap();
    assert_eq!(String::from_utf8(got).unwrap(), String::from_utf8(want).unwrap());
}

#[test]
fn transform_empty_input() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "t.csv", "");
    write(dir.path(), "a.ini", "[paths]\ntrajectories = t.csv\n");
    let o = msfair(&["transform", "--config", "a.ini", "--out", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, rows) = table(&dir.path().join("out/exposure.csv"));
    assert!(rows.is_empty());
}

#[test]
fn transform_malformed_age_names_row() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "t.csv",
        "individual_id,initial_state,ending_state,starting_age,ending_age,exposure\n\
         1,Healthy,Disabled,70.5,71.9,1.4\n\
         1,Disabled,Dead,71.9,seventy,1.9\n",
    );
    write(dir.path(), "a.ini", "[paths]\ntrajectories = t.csv\n");
    let o = msfair(&["transform", "--config", "a.ini"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row 3"), "{}", stderr(&o));
}

#[test]
fn transform_attaches_covariates() {
    let dir = study(200, 8);
    write(dir.path(), "a.ini", STUDY);
    let o = msfair(&["transform", "--config", "a.ini", "--out", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = table(&dir.path().join("out/exposure.csv"));
    for name in ["sensitive", "x1", "x2", "smoker"] {
        assert!(header.iter().any(|h| h == name));
    }
    assert!(!rows.is_empty());
}

#[test]
fn fit_cards_and_contributions() {
    let dir = study(2000, 21);
    write(dir.path(), "blind.ini", STUDY);
    write(dir.path(), "best.ini", &format!("{STUDY}[model]\nsensitive = true\n"));
    for (cfg, out) in [("blind.ini", "blind"), ("best.ini", "best")] {
        let o = msfair(&["fit", "--config", cfg, "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let blind = fs::read_to_string(dir.path().join("blind/model_card.txt")).unwrap();
    let best = fs::read_to_string(dir.path().join("best/model_card.txt")).unwrap();
    assert!(!blind.contains("term = sensitive"));
    assert!(blind.contains("uses_sensitive = false"));
    assert_eq!(best.matches("term = sensitive").count(), 4);

    let (header, rows) = table(&dir.path().join("best/contributions.csv"));
    assert_eq!(header.len(), 6);
    assert!(rows.iter().any(|r| r[0] == "sensitive"));
    for j in 1..header.len() {
        let sum: f64 = rows.iter().map(|r| r[j].parse::<f64>().unwrap()).sum();
        assert!(sum >= 0.0, "{}", header[j]);
    }
    let (header, rows) = table(&dir.path().join("blind/coefficients.csv"));
    assert_eq!(header, ["transition", "term", "estimate", "std_error"]);
    assert_eq!(rows.len(), 4 * 5);
}

#[test]
fn price_quotes_every_mode() {
    let dir = study(400, 3);
    write(dir.path(), "a.ini", STUDY);
    let o = msfair(&["price", "--config", "a.ini", "--out", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = table(&dir.path().join("out/quotes.csv"));
    assert_eq!(rows.len(), 3 * 400);
    let mode = column(&header, "mode");
    for m in ["best_estimate", "blind", "fairness_adjusted"] {
        assert_eq!(rows.iter().filter(|r| r[mode] == m).count(), 400);
    }
    let (header, _) = table(&dir.path().join("out/plot_data.csv"));
    assert!(header.iter().any(|h| h == "smoothed_premium"));
}

#[test]
fn price_unknown_mode() {
    let dir = study(50, 3);
    write(
        dir.path(),
        "a.ini",
        &format!("{STUDY}[pricing]\nmodes = best_estimate, cheapest\n"),
    );
    assert_eq!(
        msfair(&["price", "--config", "a.ini"], dir.path()).status.code(),
        Some(2)
    );
}

#[test]
fn price_smoothed_gaps_ordered_at_median_age() {
    let dir = study(10_000, 2024);
    write(dir.path(), "a.ini", STUDY);
    let o = msfair(&["price", "--config", "a.ini", "--out", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));

    let (header, rows) = table(&dir.path().join("policies.csv"));
    let age = column(&header, "issue_age");
    let mut ages: Vec<u32> = rows
        .iter()
        .map(|r| r[age].parse::<f64>().unwrap().floor() as u32)
        .collect();
    ages.sort_unstable();
    let median = ages[ages.len() / 2];

    let (header, rows) = table(&dir.path().join("out/plot_data.csv"));
    let (mode, age, smooth) = (
        column(&header, "mode"),
        column(&header, "issue_age"),
        column(&header, "smoothed_premium"),
    );
    let mut by_mode: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r[age] == median.to_string()) {
        by_mode.entry(&r[mode]).or_default().push(r[smooth].parse().unwrap());
    }
    let gap = |m: &str| {
        let v = &by_mode[m];
        v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
    };
    let (best, blind, adjusted) = (gap("best_estimate"), gap("blind"), gap("fairness_adjusted"));
    assert!(
        best >= blind && blind >= adjusted,
        "best {best} blind {blind} adjusted {adjusted}"
    );
}

#[test]
fn fair_post_reports_adjusted_quotes() {
    let dir = study(1000, 12);
    write(
        dir.path(),
        "a.ini",
        &format!("{STUDY}[fairness]\nmode = post\nage = 65\n"),
    );
    let o = msfair(&["fair", "--config", "a.ini", "--out", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = table(&dir.path().join("out/fairness_report.csv"));
    let mode = column(&header, "mode");
    assert!(header.iter().any(|h| h == "parity_gap"));
    assert_eq!(rows.iter().filter(|r| r[mode] == "fairness_adjusted").count(), 3);
    let (_, quotes) = table(&dir.path().join("out/fair_quotes.csv"));
    assert_eq!(quotes.len(), 3 * 1000);
}

#[test]
fn fair_pre_rejects_categorical() {
    let dir = study(200, 12);
    write(
        dir.path(),
        "a.ini",
        &format!("{STUDY}[fairness]\nmode = pre\not_covariates = smoker\n"),
    );
    let o = msfair(&["fair", "--config", "a.ini"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("smoker"));
}

#[test]
fn fair_pre_transports_covariate() {
    let dir = study(1000, 12);
    write(
        dir.path(),
        "a.ini",
        &format!("{STUDY}[fairness]\nmode = pre\not_covariates = x1\n"),
    );
    let o = msfair(&["fair", "--config", "a.ini", "--out", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = table(&dir.path().join("out/fairness_report.csv"));
    let mode = column(&header, "mode");
    assert!(rows.iter().any(|r| r[mode] == "blind"));
    assert!(rows.iter().any(|r| r[mode] == "pre"));
    let (header, rows) = table(&dir.path().join("out/transport_summary.csv"));
    let (stage, ks) = (column(&header, "stage"), column(&header, "ks_to_pooled"));
    for r in rows.iter().filter(|r| r[stage] == "after") {
        assert!(r[ks].parse::<f64>().unwrap() < 0.01);
    }
}

#[test]
fn fair_adversarial_logs_per_alpha() {
    let dir = study(600, 12);
    write(
        dir.path(),
        "a.ini",
        &format!("seed = 5\n{STUDY}[fairness]\nmode = adv\nalpha = 0, 2\nepochs = 3\nprobe_epochs = 3\n"),
    );
    let o = msfair(&["fair", "--config", "a.ini", "--out", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for a in ["0", "2"] {
        let (header, rows) = table(&dir.path().join(format!("out/training_log_alpha_{a}.csv")));
        assert_eq!(header[0], "epoch");
        assert_eq!(rows.len(), 3);
    }
    let (header, rows) = table(&dir.path().join("out/fairness_report.csv"));
    assert!(header.iter().any(|h| h == "parity_gap"));
    let mode = column(&header, "mode");
    assert!(rows.iter().any(|r| r[mode] == "adv_alpha_2"));
    let (_, rows) = table(&dir.path().join("out/adversarial_summary.csv"));
    assert_eq!(rows.len(), 2);
}

#[test]
fn fair_adversarial_divided() {
    let dir = study(400, 12);
    write(
        dir.path(),
        "a.ini",
        &format!(
            "seed = 5\n{STUDY}[fairness]\nmode = adv\nvariant = divided\nalpha = 1\nepochs = 2\nprobe_epochs = 2\n"
        ),
    );
    let o = msfair(&["fair", "--config", "a.ini", "--out", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for m in 1..=4 {
        assert!(dir
            .path()
            .join(format!("out/training_log_alpha_1_transition_{m}.csv"))
            .exists());
    }
    let (_, rows) = table(&dir.path().join("out/adversarial_summary.csv"));
    assert_eq!(rows.len(), 4);
}

#[test]
fn report_probabilities_are_stochastic() {
    let dir = study(500, 9);
    write(dir.path(), "a.ini", &format!("{STUDY}[report]\nindividual = 7\n"));
    let o = msfair(&["report", "--config", "a.ini", "--out", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, rows) = table(&dir.path().join("out/probabilities.csv"));
    let mut sums: BTreeMap<(String, String), f64> = BTreeMap::new();
    for r in &rows {
        *sums.entry((r[0].clone(), r[2].clone())).or_default() += r[4].parse::<f64>().unwrap();
    }
    assert!(sums.values().all(|s| (s - 1.0).abs() < 1e-9));
    let (header, rows) = table(&dir.path().join("out/occupancy.csv"));
    assert_eq!(header, ["age", "Healthy", "Disabled", "Dead"]);
    assert_eq!(rows.last().unwrap()[0], "110");

    write(dir.path(), "b.ini", &format!("{STUDY}[report]\nindividual = nobody\n"));
    assert_eq!(
        msfair(&["report", "--config", "b.ini"], dir.path()).status.code(),
        Some(2)
    );
}
