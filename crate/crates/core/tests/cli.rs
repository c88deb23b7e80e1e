use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use causal_embed::harness::report::{read_csv_rows, AggregateRow, ReportRow, ALL_QUERIES};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_causal-embed")).args(args).output().unwrap()
}

fn toy_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs/discrete_toy.toml")
        .to_str()
        .unwrap()
        .to_string()
}

fn evaluate_toy(out: &Path, replications: &str) {
    let o = cli(&["evaluate", "--config", &toy_config(), "--out", out.to_str().unwrap(), "--replications", replications]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn evaluate_writes_reports_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = cli(&["evaluate", "--config", &toy_config(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("back-door ate: mean squared error"), "{stdout}");
    for f in ["aggregate.csv", "run_manifest.json", "replication_0.csv", "estimates/replication_0.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["replications"].as_array().unwrap().len(), 1);
    assert!(manifest["replications"][0]["fingerprints"]["stage1"].is_string());
}

/// Mean of `values`, summed in order.
fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[test]
fn aggregate_matches_recomputation_from_replication_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    evaluate_toy(&out, "3");
    let mut rows: Vec<ReportRow> = Vec::new();
    for k in 0..3 {
        rows.extend(read_csv_rows::<ReportRow>(&out.join(format!("replication_{k}.csv"))).unwrap());
    }
    let agg: Vec<AggregateRow> = read_csv_rows(&out.join("aggregate.csv")).unwrap();

    let mut by_query: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    let mut by_rep: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        let param = r.parameter.to_string();
        by_query
            .entry((param.clone(), r.query.clone(), r.conditioning.clone()))
            .or_default()
            .push(r.squared_error.unwrap());
        by_rep.entry((param, r.replication)).or_default().push(r.squared_error.unwrap());
    }
    let mut checked = 0;
    for a in &agg {
        let param = a.parameter.to_string();
        let expected = if a.query == ALL_QUERIES {
            let per_rep: Vec<f64> = by_rep.iter().filter(|((p, _), _)| *p == param).map(|(_, v)| mean(v)).collect();
            assert_eq!(per_rep.len(), 3);
            mean(&per_rep)
        } else {
            let v = &by_query[&(param, a.query.clone(), a.conditioning.clone())];
            assert_eq!(v.len(), 3);
            mean(v)
        };
        let got = a.squared_error_mean.unwrap();
        assert!((got - expected).abs() <= 1e-12, "{}: {got} vs {expected}", a.query);
        checked += 1;
    }
    assert_eq!(checked, by_query.len() + 2);
}

#[test]
fn report_rebuilds_aggregate_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    evaluate_toy(&out, "2");
    let original = std::fs::read(out.join("aggregate.csv")).unwrap();
    std::fs::remove_file(out.join("aggregate.csv")).unwrap();
    let o = cli(&["report", "--config", &toy_config(), "--out", out.to_str().unwrap(), "--replications", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(out.join("aggregate.csv")).unwrap(), original);
}

#[test]
fn zero_replications_is_a_config_error() {
    let o = cli(&["evaluate", "--config", &toy_config(), "--replications", "0"]);
    assert!(!o.status.success());
    let stderr = String::from_utf8(o.stderr).unwrap();
    assert!(stderr.contains("code=config"), "{stderr}");
}

#[test]
fn missing_config_is_an_io_error() {
    let o = cli(&["evaluate", "--config", "/nonexistent/config.toml"]);
    assert!(!o.status.success());
    assert!(String::from_utf8(o.stderr).unwrap().contains("code="));
}

fn csv_experiment(dir: &Path, data: &str) -> String {
    std::fs::write(dir.join("data.csv"), data).unwrap();
    let config = dir.join("csv.toml");
    std::fs::write(
        &config,
        r#"
kind = "csv-backdoor"
replications = 1

[csv]
path = "data.csv"

[query]
treatments = [[0.0], [1.0]]

[stage1]
epochs = 2
feature_dim = 2
treatment_hidden = [4]
covariate_hidden = [4]

[stage2]
hidden = [4]
epochs = 2
"#,
    )
    .unwrap();
    config.to_str().unwrap().to_string()
}

#[test]
fn non_finite_csv_cell_names_row_and_column() {
    let tmp = tempfile::tempdir().unwrap();
    let config = csv_experiment(tmp.path(), "outcome:y,treatment:a,backdoor:x\n1.0,0.0,0.5\n2.0,1.0,NaN\n");
    let out = tmp.path().join("run");
    let o = cli(&["evaluate", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    let stderr = String::from_utf8(o.stderr).unwrap();
    assert!(stderr.contains("code=csv"), "{stderr}");
    assert!(stderr.contains("row 2"), "{stderr}");
    assert!(stderr.contains("backdoor:x"), "{stderr}");
}

#[test]
fn csv_experiment_reports_estimates_without_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let mut text = String::from("outcome:y,treatment:a,backdoor:x\n");
    for i in 0..200 {
        let x = (i % 7) as f64 / 7.0;
        let a = f64::from(u8::from(i % 3 == 0));
        text.push_str(&format!("{},{a},{x}\n", 2.0 * a + x));
    }
    let config = csv_experiment(tmp.path(), &text);
    let out = tmp.path().join("run");
    let o = cli(&["evaluate", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<ReportRow> = read_csv_rows(&out.join("replication_0.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.truth.is_none() && r.estimate.is_finite()));
    let raw = std::fs::read_to_string(out.join("replication_0.csv")).unwrap();
    assert!(raw.lines().nth(1).unwrap().ends_with(",,,"), "{raw}");
}
