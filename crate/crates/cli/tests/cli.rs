use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn crossid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = crossid(args);
    assert!(
        out.status.success(),
        "crossid {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn simulate_clean(dir: &Path) {
    ok(&[
        "simulate", "--seed", "3", "--victims", "5", "--oos", "0", "--sessions", "16",
        "--sigma", "0.05", "--miss", "0", "--phantom", "0",
        "--out", dir.to_str().unwrap(),
    ]);
}

#[test]
fn clean_pipeline_recovers_every_victim() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    simulate_clean(&data);
    let (d, r) = (data.to_str().unwrap(), run.to_str().unwrap());

    ok(&["filter", "--data", d, "--out", r]);
    let report = json(&run.join("filter_report.json"));
    assert_eq!(report["survivors"].as_array().unwrap().len(), 5);

    ok(&["associate", "--data", d, "--out", r, "--k-ratio", "1.0"]);
    let assignment = json(&run.join("assignment.json"));
    assert_eq!(assignment["k_achieved"], 5);
    assert!(run.join("tree.json").exists());

    ok(&["evaluate", "--data", d, "--run", r, "--out", r]);
    let eval = json(&run.join("eval.json"));
    assert_eq!(eval["accuracy"], 1.0);
    assert_eq!(eval["mean_purity"], 1.0);
}

#[test]
fn repeated_runs_write_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "simulate", "--seed", "9", "--victims", "6", "--oos", "3", "--sessions", "20",
        "--out", data.to_str().unwrap(),
    ]);
    let mut artifacts = Vec::new();
    for name in ["a", "b"] {
        let run = tmp.path().join(name);
        let (d, r) = (data.to_str().unwrap(), run.to_str().unwrap());
        ok(&["associate", "--data", d, "--out", r, "--seed", "1"]);
        ok(&["evaluate", "--data", d, "--run", r, "--out", r]);
        let files: Vec<Vec<u8>> = ["assignment.json", "tree.json", "filter_report.json", "eval.json"]
            .iter()
            .map(|f| std::fs::read(run.join(f)).unwrap())
            .collect();
        artifacts.push(files);
    }
    assert_eq!(artifacts[0], artifacts[1]);
}

#[test]
fn metric_and_baseline_flags_route() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "simulate", "--seed", "4", "--victims", "6", "--oos", "4", "--sessions", "20",
        "--out", data.to_str().unwrap(),
    ]);
    let d = data.to_str().unwrap();
    let mut objectives = Vec::new();
    for (name, extra) in [("dice", vec![]), ("euc", vec!["--metric", "euclidean"]), ("naive", vec!["--baseline", "naive"])] {
        let run = tmp.path().join(name);
        let mut args = vec!["associate", "--data", d, "--out", run.to_str().unwrap(), "--k", "6"];
        args.extend(extra);
        ok(&args);
        objectives.push(json(&run.join("assignment.json"))["objective"].as_f64().unwrap());
    }
    assert_ne!(objectives[0], objectives[1]);
    assert_ne!(objectives[0], objectives[2]);
}

#[test]
fn missing_sightings_file_exits_2_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate_clean(&data);
    std::fs::remove_file(data.join("sightings.csv")).unwrap();
    let out = crossid(&["filter", "--data", data.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sightings.csv"));
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(crossid(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(crossid(&[]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate_clean(&data);
    let out = crossid(&["associate", "--data", data.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "--omega", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_input_is_a_pipeline_error_unless_lenient() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate_clean(&data);
    let sightings = data.join("sightings.csv");
    let mut text = std::fs::read_to_string(&sightings).unwrap();
    text.push_str("not,a,valid,row\n");
    std::fs::write(&sightings, text).unwrap();
    let (d, r) = (data.to_str().unwrap(), tmp.path().join("run"));
    let out = crossid(&["filter", "--data", d, "--out", r.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let out = ok(&["filter", "--data", d, "--out", r.to_str().unwrap(), "--lenient"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn empty_assignment_scores_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    simulate_clean(&data);
    let (d, r) = (data.to_str().unwrap(), run.to_str().unwrap());
    ok(&["associate", "--data", d, "--out", r]);
    let empty = r#"{"pairs":[],"objective":0.0,"k_requested":0,"k_achieved":0,"clamped":false}"#;
    std::fs::write(run.join("assignment.json"), empty).unwrap();
    ok(&["evaluate", "--data", d, "--run", r, "--out", r]);
    let eval = json(&run.join("eval.json"));
    assert_eq!(eval["accuracy"], 0.0);
    assert!(eval["mean_purity"].is_null());
}

#[test]
fn evaluate_without_truth_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    simulate_clean(&data);
    let (d, r) = (data.to_str().unwrap(), run.to_str().unwrap());
    ok(&["associate", "--data", d, "--out", r]);
    std::fs::write(data.join("truth.jsonl"), "").unwrap();
    let out = crossid(&["evaluate", "--data", d, "--run", r, "--out", r]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no true label"));
}

#[test]
fn sweep_writes_one_row_per_method_and_value() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    ok(&[
        "sweep", "--param", "oos", "--values", "0,2,4,6", "--seeds", "1",
        "--victims", "4", "--sessions", "12", "--out", out.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,parameter_value,accuracy,mean_purity"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 12);
    for method in ["ours", "ours-euclidean", "naive"] {
        assert_eq!(rows.iter().filter(|r| r.starts_with(&format!("{method},"))).count(), 4);
    }
}

#[test]
fn sweep_rejects_unknown_parameter() {
    let tmp = tempfile::tempdir().unwrap();
    let out = crossid(&["sweep", "--param", "colour", "--values", "1", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn feasibility_writes_a_g_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("f");
    ok(&["feasibility", "--g", "5,40", "--trials", "3", "--out", out.to_str().unwrap()]);
    let text = std::fs::read_to_string(out.join("feasibility.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "g,mean_distinguishability");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("5,") && lines[2].starts_with("40,"));

    let data = tmp.path().join("data");
    simulate_clean(&data);
    ok(&["feasibility", "--data", data.to_str().unwrap(), "--g", "16", "--trials", "2", "--out", out.to_str().unwrap()]);
    let report = json(&out.join("feasibility.json"));
    assert_eq!(report["victims"], 5);
    assert_eq!(report["sessions"], 16);
}

#[test]
fn tree_command_writes_every_node() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("t");
    simulate_clean(&data);
    ok(&["tree", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let tree = json(&out.join("tree.json"));
    let leaves = tree["leaves"].as_u64().unwrap() as usize;
    assert_eq!(tree["nodes"].as_array().unwrap().len(), 2 * leaves - 1);
}
