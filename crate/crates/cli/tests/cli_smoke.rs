//! Smoke tests for the command-line tool: every subcommand runs end to end
//! on a small budget, produces the files it promises, and fails loudly with
//! machine-readable JSON on bad input.

use std::path::Path;
use std::process::Command;

fn chargesim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chargesim"))
}

#[test]
fn scenarios_lists_every_builtin() {
    let out = chargesim().arg("scenarios").output().expect("binary runs");
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).expect("utf-8 output");
    for name in [
        "duopoly_bertrand",
        "duopoly_learning_price_only",
        "duopoly_learning_waiting",
        "oligopoly_mixed",
        "colocated_ablation",
        "split_market_personalized",
    ] {
        assert!(stdout.contains(name), "listing misses {name}:\n{stdout}");
    }
}

#[test]
fn train_then_run_round_trips_policies_and_reports() {
    let dir = tempfile::tempdir().expect("tempdir");
    let train_dir = dir.path().join("train");
    let status = chargesim()
        .args(["train", "--scenario", "duopoly_learning_price_only"])
        .args(["--days", "2", "--seed", "3"])
        .arg("--out")
        .arg(&train_dir)
        .status()
        .expect("binary runs");
    assert!(status.success(), "training must exit 0");
    let policy_path = train_dir.join("policies.json");
    assert!(policy_path.is_file(), "training must save policies.json");
    assert!(train_dir.join("training.csv").is_file(), "training must trace per-day loss");

    let run_dir = dir.path().join("run");
    let status = chargesim()
        .args(["run", "--scenario", "duopoly_learning_price_only"])
        .args(["--days", "1", "--seed", "3", "--logs"])
        .arg("--policies")
        .arg(&policy_path)
        .arg("--out")
        .arg(&run_dir)
        .status()
        .expect("binary runs");
    assert!(status.success(), "evaluation must exit 0");
    for file in ["summary.json", "charge_records.csv", "offers.csv", "occupancy.csv", "revenue.csv"] {
        assert!(run_dir.join(file).is_file(), "evaluation must write {file}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("summary.json")).unwrap())
            .expect("summary parses");
    assert_eq!(summary["days"], 1);
    assert_eq!(summary["stations"].as_array().map(Vec::len), Some(2));
}

#[test]
fn run_exports_a_fixed_price_market_without_policies() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out_dir = dir.path().join("bertrand");
    let status = chargesim()
        .args(["run", "--scenario", "duopoly_bertrand", "--days", "1", "--seed", "5"])
        .arg("--out")
        .arg(&out_dir)
        .status()
        .expect("binary runs");
    assert!(status.success());
    assert!(out_dir.join("summary.json").is_file());
}

#[test]
fn certify_exits_zero_on_a_clean_sweep() {
    let out = chargesim()
        .args(["certify", "--instances", "50", "--seed", "7"])
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "certify must exit 0 on a clean sweep");
}

#[test]
fn unknown_scenarios_fail_with_machine_readable_json() {
    let out = chargesim()
        .args(["run", "--scenario", "no_such_market", "--days", "1"])
        .arg("--out")
        .arg(Path::new("/tmp/chargesim-smoke-unused"))
        .output()
        .expect("binary runs");
    assert!(!out.status.success(), "unknown scenario must exit nonzero");
    let stderr = String::from_utf8(out.stderr).expect("utf-8 stderr");
    let last_line = stderr.lines().last().unwrap_or_default();
    let payload: serde_json::Value =
        serde_json::from_str(last_line).expect("stderr ends with an error JSON object");
    assert!(payload["error"].is_string(), "error payload names the failure");
}

#[test]
fn scenario_files_export_and_load_back() {
    let dir = tempfile::tempdir().expect("tempdir");
    let status = chargesim()
        .args(["scenarios", "--export"])
        .arg(dir.path())
        .status()
        .expect("binary runs");
    assert!(status.success());
    let exported = dir.path().join("duopoly_bertrand.toml");
    assert!(exported.is_file(), "export must write one TOML per builtin");

    let out_dir = dir.path().join("from-file");
    let status = chargesim()
        .arg("run")
        .arg("--scenario")
        .arg(&exported)
        .args(["--days", "1", "--seed", "5"])
        .arg("--out")
        .arg(&out_dir)
        .status()
        .expect("binary runs");
    assert!(status.success(), "a freshly exported scenario file must run");
    assert!(out_dir.join("summary.json").is_file());
}
