use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ppta_core::simgen::{generate, SimConfig};

fn ppta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppta"))
        .args(args)
        .output()
        .expect("run ppta")
}

fn ok(args: &[&str]) -> Output {
    let out = ppta(args);
    assert!(
        out.status.success(),
        "ppta {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, seed: &str, n: &str, d: &str, mode: &str) {
    ok(&[
        "simulate",
        "--seed",
        seed,
        "--n",
        n,
        "--d",
        d,
        "--mode",
        mode,
        "--out",
        s(dir),
    ]);
}

fn estimates(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("estimates.json")).unwrap()).unwrap()
}

fn delta_of(est: &serde_json::Value, method: &str) -> f64 {
    est["estimates"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["method"] == method)
        .unwrap_or_else(|| panic!("no {method} record"))["delta"]
        .as_f64()
        .unwrap()
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    simulate(&a, "11", "400", "3", "heterogeneous");
    simulate(&b, "11", "400", "3", "heterogeneous");
    for f in ["panel.csv", "e_true.csv", "dgcop.csv", "sim_config.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let header = fs::read_to_string(a.join("panel.csv")).unwrap();
    assert!(
        header.starts_with("id,w_1,w_2,w_3,x_1_1"),
        "{}",
        &header[..40]
    );
}

#[test]
fn single_period_panel_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, "5", "600", "1", "homogeneous");
    let out = tmp.path().join("an");
    let input = sim.join("panel.csv");
    ok(&[
        "analyze",
        "--input",
        s(&input),
        "--pw",
        "3",
        "--px",
        "3",
        "--d",
        "1",
        "--seed",
        "2",
        "--k",
        "100",
        "--b",
        "0",
        "--out",
        s(&out),
    ]);
    let est = estimates(&out);
    assert_eq!(est["estimates"].as_array().unwrap().len(), 4);
    assert!((delta_of(&est, "OW") - 0.5).abs() < 0.3);
}

#[test]
fn analyze_simulated_panel_gives_four_estimates() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, "21", "2000", "3", "homogeneous");
    let out = tmp.path().join("an");
    let input = sim.join("panel.csv");
    let stdout = ok(&[
        "analyze",
        "--input",
        s(&input),
        "--pw",
        "3",
        "--px",
        "3",
        "--d",
        "3",
        "--seed",
        "4",
        "--k",
        "300",
        "--b",
        "0",
        "--out",
        s(&out),
    ])
    .stdout;
    assert_eq!(String::from_utf8(stdout).unwrap().lines().count(), 4);
    let est = estimates(&out);
    assert_eq!(est["estimates"].as_array().unwrap().len(), 4);
    assert!((delta_of(&est, "OW") - delta_of(&est, "PPTA")).abs() < 0.03);
    for f in [
        "effects.csv",
        "weight_summary.csv",
        "inclusion.csv",
        "ppta_deltas.csv",
        "weights_ipw.csv",
        "weights_sw.csv",
        "weights_ow.csv",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let inclusion = fs::read_to_string(out.join("inclusion.csv")).unwrap();
    assert_eq!(inclusion.lines().count(), 2001);
    let deltas = fs::read_to_string(out.join("ppta_deltas.csv")).unwrap();
    assert_eq!(deltas.lines().count(), 301);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, "8", "800", "3", "homogeneous");
    let cfg = tmp.path().join("cfg.json");
    let out = tmp.path().join("an");
    fs::write(
        &cfg,
        serde_json::json!({
            "input": sim.join("panel.csv"), "pw": 3, "px": 3, "d": 3, "seed": 1,
            "methods": ["IPW", "OW"], "b": 0, "out": out,
        })
        .to_string(),
    )
    .unwrap();
    ok(&["analyze", "--config", s(&cfg), "--methods", "OW"]);
    let est = estimates(&out);
    let methods: Vec<&str> = est["estimates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["method"].as_str().unwrap())
        .collect();
    assert_eq!(methods, ["OW"]);
}

/// Count outcome with person-time offset; the log link is chosen from the data.
#[test]
fn count_outcome_gives_rate_ratio_table() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = generate(&SimConfig {
        n: 1500,
        seed: 3,
        ..SimConfig::default()
    })
    .unwrap();
    let mut raw = sim.panel.to_raw();
    let n = raw.outcome.len();
    let offset: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64 * 0.5).collect();
    raw.outcome = (0..n)
        .map(|i| {
            ((0.07 * f64::from(sim.panel.cumulative_exposure(i))).exp() * offset[i] * 20.0).round()
        })
        .collect();
    raw.offset = Some(offset);
    raw.kind = Some(ppta_core::panel::OutcomeKind::Count);
    let ds = ppta_core::panel::validate(raw).unwrap();
    let input = tmp.path().join("counts.csv");
    ds.write_csv_path(&input).unwrap();
    let out = tmp.path().join("an");
    ok(&[
        "analyze",
        "--input",
        s(&input),
        "--pw",
        "3",
        "--px",
        "3",
        "--d",
        "3",
        "--methods",
        "IPW,OW",
        "--seed",
        "9",
        "--b",
        "20",
        "--out",
        s(&out),
    ]);
    let table = fs::read_to_string(out.join("effects.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("method,estimate"));
    let ipw = lines.next().unwrap();
    assert!(ipw.starts_with("IPW,\"1.07 ["), "{ipw}");
    assert!(ipw.ends_with("]\""), "{ipw}");
    let est = estimates(&out);
    assert_eq!(est["estimates"][0]["link"], "log");
    let rec = &est["estimates"][0];
    let (rr, lo, hi) = (
        rec["delta"].as_f64().unwrap(),
        rec["ci_low"].as_f64().unwrap(),
        rec["ci_high"].as_f64().unwrap(),
    );
    assert!((rr - 0.07f64.exp()).abs() < 0.005, "{rec}");
    assert!(lo <= rr && rr <= hi, "{rec}");
    let summary = fs::read_to_string(out.join("weight_summary.csv")).unwrap();
    assert!(summary.starts_with("statistic,IPW,OW\n"));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"methods": [], "input": "x.csv", "pw": 1, "px": 1, "d": 1, "seed": 1, "out": "o"}"#,
    )
    .unwrap();
    assert_eq!(
        ppta(&["analyze", "--config", s(&cfg)]).status.code(),
        Some(2)
    );
    assert_eq!(
        ppta(&["replicate", "--seed", "1", "--out", "o", "--bogus"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        ppta(&["analyze", "--input", "x.csv", "--pw", "1"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(ppta(&["simulate", "--out", "o"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, "2", "300", "3", "homogeneous");
    let input = sim.join("panel.csv");
    let out = tmp.path().join("an");
    let missing = ppta(&[
        "analyze",
        "--input",
        "/nonexistent.csv",
        "--pw",
        "3",
        "--px",
        "3",
        "--d",
        "3",
        "--seed",
        "1",
        "--out",
        s(&out),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    let wrong_dims = ppta(&[
        "analyze",
        "--input",
        s(&input),
        "--pw",
        "3",
        "--px",
        "2",
        "--d",
        "3",
        "--seed",
        "1",
        "--out",
        s(&out),
    ]);
    assert_eq!(wrong_dims.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&wrong_dims.stderr).contains("panel"));
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, "31", "600", "3", "homogeneous");
    let input = sim.join("panel.csv");
    let run = |threads: &str| {
        let out = tmp.path().join(format!("t{threads}"));
        ok(&[
            "--threads",
            threads,
            "analyze",
            "--input",
            s(&input),
            "--pw",
            "3",
            "--px",
            "3",
            "--d",
            "3",
            "--seed",
            "6",
            "--k",
            "80",
            "--b",
            "4",
            "--out",
            s(&out),
        ]);
        fs::read(out.join("estimates.json")).unwrap()
    };
    assert_eq!(run("1"), run("3"));
}

#[test]
fn replicate_smoke_run_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("rep");
    let stdout = ok(&[
        "replicate",
        "--mode",
        "homogeneous",
        "--d",
        "3",
        "--r",
        "3",
        "--n",
        "600",
        "--k",
        "60",
        "--b",
        "0",
        "--seed",
        "1",
        "--out",
        s(&out),
    ])
    .stdout;
    assert!(String::from_utf8(stdout).unwrap().contains("completed 3/3"));
    let table1 = fs::read_to_string(out.join("table1.csv")).unwrap();
    assert_eq!(table1.lines().count(), 5, "{table1}");
    assert!(out.join("table3.csv").exists());
    let cmp: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("comparison.json")).unwrap()).unwrap();
    assert!(cmp["comparison"].as_array().is_some_and(|a| !a.is_empty()));
    assert!(cmp["reports"][0]["cells"].is_array());
}

#[test]
fn diagnose_exports_weight_comparison() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, "17", "1000", "3", "heterogeneous");
    let out = tmp.path().join("dg");
    let input = sim.join("panel.csv");
    let dgcop = sim.join("dgcop.csv");
    ok(&[
        "diagnose",
        "--input",
        s(&input),
        "--pw",
        "3",
        "--px",
        "3",
        "--d",
        "3",
        "--dgcop",
        s(&dgcop),
        "--out",
        s(&out),
    ]);
    let text = fs::read_to_string(out.join("weight_comparison.csv")).unwrap();
    let mut rows = text.lines();
    assert_eq!(rows.next(), Some("id,log_ipw,ow,dgcop_count"));
    let rows: Vec<Vec<&str>> = rows.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 1000);
    for r in &rows {
        assert!(r[1].parse::<f64>().unwrap() >= 0.0);
        let ow: f64 = r[2].parse().unwrap();
        assert!(ow > 0.0 && ow < 1.0);
        assert!(r[3].parse::<u32>().unwrap() <= 3);
    }
    let positivity = fs::read_to_string(out.join("positivity.csv")).unwrap();
    assert_eq!(positivity.lines().count(), 4);
}
