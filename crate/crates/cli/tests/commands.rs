//! End-to-end checks of the `dro-prompt` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cli(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dro-prompt"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["run", "--config", "no/such/experiment.toml"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no/such/experiment.toml"), "{}", stderr(&out));
}

#[test]
fn invalid_field_is_reported_by_name() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[run]\nema_rate = 3.0\n").unwrap();
    let out = cli(&["run", "--config", "bad.toml"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("ema_rate"), "{}", stderr(&out));
}

#[test]
fn single_round_run_writes_one_round_record() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), "[run]\nmax_steps = 1\nbatch_size = 5\n").unwrap();
    let out = cli(&["run", "--config", "exp.toml", "--out-dir", "res"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let trace = std::fs::read_to_string(dir.path().join("res/trace.jsonl")).unwrap();
    let kinds: Vec<String> = trace
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["type"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(kinds, ["header", "round", "summary"]);
    assert_eq!(summary(&dir.path().join("res"))["rounds"], 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("best:"));
}

#[test]
fn zero_radius_override_reports_nominal_behaviour() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(
        &["run", "--set", "max_steps=2", "--set", "batch_size=4", "--set", "epsilon=0", "--out-dir", "res"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let s = summary(&dir.path().join("res"));
    assert_eq!(s["acquisition_mode"], "robust");
    assert_eq!(s["effective_mode"], "nominal-ucb");
}

#[test]
fn repeated_runs_overwrite_identically() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["run", "--set", "max_steps=2", "--set", "batch_size=4", "--out-dir", "res"];
    assert!(cli(&args, dir.path()).status.success());
    let first = std::fs::read(dir.path().join("res/trace.jsonl")).unwrap();
    assert!(cli(&args, dir.path()).status.success());
    assert_eq!(first, std::fs::read(dir.path().join("res/trace.jsonl")).unwrap());
    let out = cli(&["replay", "res/trace.jsonl"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn plotdata_matches_golden_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let trace = fixture("golden_trace.jsonl");
    let out = cli(&["plotdata", trace.to_str().unwrap(), "--out-dir", "plots"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let produced = std::fs::read(dir.path().join("plots/golden_trace_convergence.csv")).unwrap();
    assert_eq!(produced, std::fs::read(fixture("golden_convergence.csv")).unwrap());
}

#[test]
fn plotdata_rejects_unknown_schema_version() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("golden_trace.jsonl")).unwrap();
    let bumped = text.replacen("\"schema_version\":1", "\"schema_version\":99", 1);
    std::fs::write(dir.path().join("future.jsonl"), bumped).unwrap();
    let out = cli(&["plotdata", "future.jsonl"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("schema"), "{}", stderr(&out));
}

#[test]
fn compare_with_zero_radius_gives_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(
        &[
            "compare", "--arms", "nominal-ucb,robust", "--seeds", "3", "--tasks", "0,1", "--set", "epsilon=0",
            "--set", "max_steps=3", "--set", "batch_size=5", "--out-dir", "cmp",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let runs = std::fs::read_to_string(dir.path().join("cmp/runs.csv")).unwrap();
    let rows: Vec<Vec<&str>> = runs.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for task in ["0", "1"] {
        let by_arm: Vec<&Vec<&str>> = rows.iter().filter(|r| r[1] == task).collect();
        assert_eq!(by_arm.len(), 2);
        assert_eq!(by_arm[0][3..], by_arm[1][3..]);
    }
    for file in ["table.txt", "table.csv", "seeds.csv", "report.json"] {
        assert!(dir.path().join("cmp").join(file).exists(), "{file}");
    }
    // Both arms' traces feed the paired plot table.
    let traces: Vec<String> = ["nominal-ucb", "robust"]
        .iter()
        .flat_map(|arm| {
            std::fs::read_dir(dir.path().join("cmp/traces").join(arm))
                .unwrap()
                .map(|e| e.unwrap().path().to_string_lossy().into_owned())
        })
        .collect();
    let mut args = vec!["plotdata"];
    args.extend(traces.iter().map(String::as_str));
    args.extend(["--out-dir", "plots"]);
    let out = cli(&args, dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let paired = std::fs::read_to_string(dir.path().join("plots/paired.csv")).unwrap();
    assert_eq!(paired.lines().count(), 3);
}

#[test]
fn compare_needs_two_arms() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["compare", "--arms", "robust", "--seeds", "0"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn solve_inner_prints_the_worst_case_weights() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(
        &["solve-inner", "--ucb", "0.2,0.9", "--w-ref", "0.5,0.5", "--epsilon", "0.1", "--divergence", "tv"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // Moving 0.1 of mass onto the cheaper atom: 0.6 * 0.2 + 0.4 * 0.9.
    assert!((v["value"].as_f64().unwrap() - 0.48).abs() < 1e-9, "{v}");
    assert!((v["nominal"].as_f64().unwrap() - 0.55).abs() < 1e-12);
}

#[test]
fn bundled_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["shift.toml", "external.toml"] {
        dro_prompt::ExperimentConfig::load(root.join(name), &[]).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
