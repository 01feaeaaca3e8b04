use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use synmoe::commands::route_stats_from;
use synmoe::config::RunConfig;
use synmoe::HarnessError;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

fn fixture(name: &str) -> PathBuf {
    Path::new(FIXTURES).join(name)
}

fn synmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synmoe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn empty_stage_list_writes_only_the_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = synmoe(&["train", "--stages", "[]", "--seed", "7", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let entries: Vec<_> = std::fs::read_dir(&out).unwrap().collect();
    assert_eq!(entries.len(), 1);
    let echo: RunConfig =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo.seed, 7);
    assert!(echo.stages.is_empty());
}

#[test]
fn flags_override_config_file_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"seed": 3, "steps": 11, "stages": []}"#).unwrap();
    let out = dir.path().join("run");
    let o = synmoe(&[
        "train",
        "--config",
        s(&cfg),
        "--steps",
        "5",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echo: RunConfig =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!((echo.seed, echo.steps), (3, 5));
}

#[test]
fn validation_errors_exit_one_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    for args in [
        vec!["train", "--top_k", "9"],
        vec!["train", "--alpha", "-1"],
        vec!["train", "--stages", "stage_2_1,stage_1_1"],
        vec!["train", "--samples", "0"],
        vec!["grad-check", "--grad_eps", "1"],
        vec!["grad-check", "--corrupt_backward", "not_an_op"],
        vec!["train", "--no_such_key", "1"],
    ] {
        let mut a = args.clone();
        a.extend(["--out", s(&out)]);
        let o = synmoe(&a);
        assert_eq!(code(&o), 1, "{args:?}: {}", stderr(&o));
        assert!(!out.exists(), "{args:?} wrote output before failing");
    }
}

#[test]
fn unknown_config_file_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"seed": 3, "learning_rate": 0.1}"#).unwrap();
    let o = synmoe(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn malformed_config_reports_its_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, "{\n  \"seed\": 3,\n  \"steps\" 4\n}\n").unwrap();
    let o = synmoe(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn stage_2_2_without_csqa_is_an_actionable_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = synmoe(&["train", "--stages", "stage_2_2", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    let msg = stderr(&o);
    assert!(msg.contains("--csqa") && msg.contains("gen-csqa"), "{msg}");
    assert!(!out.exists());

    let missing = dir.path().join("nope.jsonl");
    let o = synmoe(&[
        "train",
        "--stages",
        "stage_2_2",
        "--csqa",
        s(&missing),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nope.jsonl"));
}

#[test]
fn corrupted_backward_fails_naming_the_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let o = synmoe(&[
        "grad-check",
        "--corrupt_backward",
        "silu",
        "--grad_seeds",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("op/silu"), "{}", stderr(&o));
    let report = std::fs::read_to_string(out.join("grad_check.json")).unwrap();
    assert!(report.contains("op/silu"));
}

#[test]
fn grad_check_report_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = synmoe(&[
            "grad-check",
            "--grad_seeds",
            "2",
            "--seed",
            "4",
            "--out",
            s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        reports.push(std::fs::read(out.join("grad_check.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn collapsed_fixture_reports_full_share_and_loss_m() {
    let stats = route_stats_from(&fixture("routing_collapsed.csv"), 1).unwrap();
    assert_eq!(stats.max_share.token_fraction, 1.0);
    assert_eq!(stats.min_share.token_fraction, 0.0);
    assert!((stats.load_balance_loss - 4.0).abs() <= 1e-9);
    assert_eq!(stats.steps, vec![20]);
}

#[test]
fn uniform_fixture_reports_equal_shares_and_unit_loss() {
    let stats = route_stats_from(&fixture("routing_uniform.csv"), 3).unwrap();
    assert!(stats.shares.iter().all(|s| s.token_fraction == 0.25));
    assert!((stats.load_balance_loss - 1.0).abs() <= 1e-12);
    assert_eq!(stats.steps, vec![0, 10, 20]);
}

#[test]
fn route_stats_cli_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rs");
    let o = synmoe(&[
        "route-stats",
        "--run",
        s(&fixture("routing_collapsed.csv")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("max share 1.000000"), "{text}");
    assert!(text.contains("load-balance loss 4.000000"), "{text}");
    let csv = std::fs::read_to_string(out.join("route_stats.csv")).unwrap();
    assert!(csv.starts_with("layer,expert,token_fraction,mean_prob\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
}

#[test]
fn route_stats_without_telemetry_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = synmoe(&[
        "route-stats",
        "--run",
        s(dir.path()),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(
        stderr(&o).contains("no routing telemetry"),
        "{}",
        stderr(&o)
    );

    let bad = dir.path().join("routing.csv");
    std::fs::write(
        &bad,
        "step,layer,expert,token_fraction,mean_prob\n0,0,0,0.6,0.5\n0,0,1,0.6,0.5\n",
    )
    .unwrap();
    let o = synmoe(&[
        "route-stats",
        "--run",
        s(&bad),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("sum to 1.2"), "{}", stderr(&o));
}

#[test]
fn lift_identity_rig_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let o = synmoe(&[
        "lift",
        "--frame",
        s(&fixture("identity_rig.json")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let frame: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("identity_rig.json")).unwrap())
            .unwrap();
    let depth: Vec<f64> = serde_json::from_value(frame["depth"]["data"].clone()).unwrap();
    let mut r = csv::Reader::from_path(dir.path().join("points.csv")).unwrap();
    let mut n = 0;
    for rec in r.records() {
        let v: Vec<f64> = rec.unwrap().iter().map(|x| x.parse().unwrap()).collect();
        let (i, j) = (v[0], v[1]);
        let d = depth[i as usize * 4 + j as usize];
        assert_eq!(&v[2..], &[j * d, i * d, d]);
        n += 1;
    }
    assert_eq!(n, 16);
}

#[test]
fn malformed_inputs_exit_one_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs");
    std::fs::create_dir(&pairs).unwrap();
    std::fs::copy(fixture("malformed.json"), pairs.join("bad.json")).unwrap();
    let o = synmoe(&["gen-csqa", "--pairs", s(&pairs), "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 5 column 5"), "{}", stderr(&o));

    let o = synmoe(&[
        "lift",
        "--frame",
        s(&fixture("malformed.json")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));
}

#[test]
fn gen_csqa_on_the_fixture_emits_both_levels_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = synmoe(&[
            "gen-csqa",
            "--pairs",
            s(&fixture("pairs")),
            "--out",
            s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        files.push(std::fs::read_to_string(out.join("csqa.jsonl")).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let lines: Vec<serde_json::Value> = files[0]
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!lines.is_empty() && lines.len() <= 8);
    for level in ["object", "relation"] {
        assert!(lines.iter().any(|q| q["level"] == level), "no {level} QA");
    }
}

#[test]
fn gen_csqa_without_input_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = synmoe(&["gen-csqa", "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--pairs"));
}

#[test]
fn training_resumes_at_stage_boundaries() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let args = [
        "train",
        "--stages",
        "stage_1_1,stage_1_2",
        "--steps",
        "3",
        "--layers",
        "2",
        "--samples",
        "8",
        "--out",
        s(&out),
    ];
    let first = synmoe(&args);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let report = std::fs::read(out.join("stage_1_2/report.json")).unwrap();

    std::fs::remove_dir_all(out.join("stage_1_2")).unwrap();
    let second = synmoe(&args);
    let text = String::from_utf8_lossy(&second.stdout);
    assert!(text.contains("stage_1_1: reused"), "{text}");
    assert!(!text.contains("stage_1_2: reused"), "{text}");
    assert_eq!(
        std::fs::read(out.join("stage_1_2/report.json")).unwrap(),
        report
    );

    let mut changed = args.to_vec();
    changed[4] = "4";
    let third = synmoe(&changed);
    assert!(!String::from_utf8_lossy(&third.stdout).contains("reused"));
}

#[test]
fn help_exits_zero_and_usage_errors_exit_one() {
    assert_eq!(code(&synmoe(&["--help"])), 0);
    assert_eq!(code(&synmoe(&["train", "--help"])), 0);
    assert_eq!(code(&synmoe(&[])), 1);
    assert_eq!(code(&synmoe(&["frobnicate"])), 1);
}

#[test]
fn internal_breaches_map_to_exit_two() {
    assert_eq!(HarnessError::Internal("x".into()).exit_code(), 2);
    assert_eq!(
        HarnessError::Core(synmoe_core::Error::Oracle("x".into())).exit_code(),
        2
    );
    assert_eq!(HarnessError::Config("x".into()).exit_code(), 1);
    assert_eq!(HarnessError::Missing("x".into()).exit_code(), 1);
}
