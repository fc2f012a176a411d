use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use faasmeter_core::trace::fmt_f64;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_faasmeter"));
    // Tests control output locations explicitly.
    cmd.env_remove("FAASMETER_OUT");
    cmd
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawning faasmeter");
    assert!(
        out.status.success(),
        "command failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr_of(cmd: &mut Command) -> (i32, String) {
    let out = cmd.output().expect("spawning faasmeter");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn simulate_into(scenario_name: &str, dir: &Path) {
    run_ok(bin().args([
        "simulate",
        "--scenario",
        scenario(scenario_name).to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]));
}

#[test]
fn simulate_writes_traces_truth_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    simulate_into("four_fn.json", tmp.path());
    for name in
        ["invocations.csv", "system.csv", "cpu.csv", "utilization.csv", "counters.csv", "truth.json", "manifest.json"]
    {
        assert!(tmp.path().join(name).exists(), "missing {name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap())
            .unwrap();
    let artifacts = manifest["artifacts"].as_object().unwrap();
    assert!(artifacts.contains_key("system.csv"));
    for hash in artifacts.values() {
        assert_eq!(hash.as_str().unwrap().len(), 64, "sha256 hex expected");
    }
}

#[test]
fn rerun_with_same_seed_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    simulate_into("four_fn.json", a.path());
    simulate_into("four_fn.json", b.path());
    assert_eq!(
        fs::read(a.path().join("manifest.json")).unwrap(),
        fs::read(b.path().join("manifest.json")).unwrap(),
        "manifests differ between identical runs"
    );
    assert_eq!(
        fs::read(a.path().join("system.csv")).unwrap(),
        fs::read(b.path().join("system.csv")).unwrap()
    );
}

#[test]
fn unknown_scenario_key_is_named_and_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(
        &bad,
        r#"{"workload":{"functions":[],"duration_s":1,"seed":1},
            "truth":{"idle_wattz":5,"per_function_watts":{}},"synthesis":{}}"#,
    )
    .unwrap();
    let (code, stderr) =
        stderr_of(bin().args(["simulate", "--scenario", bad.to_str().unwrap()]));
    assert_eq!(code, 2, "stderr: {stderr}");
    assert!(stderr.contains("idle_wattz"), "unknown key not named: {stderr}");
}

#[test]
fn missing_scenario_file_exits_3() {
    let (code, stderr) =
        stderr_of(bin().args(["simulate", "--scenario", "/nonexistent/sc.json"]));
    assert_eq!(code, 3, "stderr: {stderr}");
}

#[test]
fn unknown_flag_exits_1() {
    let (code, _) = stderr_of(bin().args(["simulate", "--bogus"]));
    assert_eq!(code, 1);
}

#[test]
fn help_lists_flags_with_units() {
    let out = run_ok(bin().args(["profile", "--help"]));
    let help = String::from_utf8_lossy(&out.stdout);
    for flag in ["--dir", "--mode", "--online", "--delta-s", "--idle-watts", "--alpha", "--out"] {
        assert!(help.contains(flag), "help missing {flag}:\n{help}");
    }
    assert!(help.contains("seconds"), "units missing from help");
    assert!(help.contains("watts"), "units missing from help");
}

#[test]
fn env_var_sets_default_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("from_env");
    let mut cmd = bin();
    cmd.env("FAASMETER_OUT", &out_dir);
    cmd.args(["simulate", "--scenario", scenario("three_fn.json").to_str().unwrap()]);
    run_ok(&mut cmd);
    assert!(out_dir.join("manifest.json").exists());
}

#[test]
fn combined_without_cpu_trace_names_the_missing_input() {
    let tmp = tempfile::tempdir().unwrap();
    simulate_into("four_fn.json", tmp.path());
    fs::remove_file(tmp.path().join("cpu.csv")).unwrap();
    let (code, stderr) =
        stderr_of(bin().args(["profile", "--dir", tmp.path().to_str().unwrap(), "--mode", "combined"]));
    assert_eq!(code, 2, "stderr: {stderr}");
    assert!(stderr.contains("cpu.csv"), "missing input not named: {stderr}");
}

#[test]
fn pure_disagg_without_cpu_trace_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    simulate_into("three_fn.json", tmp.path());
    fs::remove_file(tmp.path().join("cpu.csv")).unwrap();
    fs::remove_file(tmp.path().join("counters.csv")).unwrap();
    run_ok(bin().args([
        "profile",
        "--dir",
        tmp.path().to_str().unwrap(),
        "--mode",
        "no-idle",
        "--no-control-plane",
        "--out",
        tmp.path().to_str().unwrap(),
    ]));
    let lines = fs::read_to_string(tmp.path().join("footprints.jsonl")).unwrap();
    assert!(lines.lines().count() >= 3);
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("valid JSON line");
        assert!(v["function_id"].is_string());
        assert!(v["joules_per_invocation"].is_number());
    }
}

#[test]
fn profile_online_emits_footprint_series() {
    let tmp = tempfile::tempdir().unwrap();
    simulate_into("bursty.json", tmp.path());
    run_ok(bin().args([
        "profile",
        "--dir",
        tmp.path().to_str().unwrap(),
        "--mode",
        "no-idle",
        "--online",
        "--out",
        tmp.path().to_str().unwrap(),
    ]));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("profile.json")).unwrap())
            .unwrap();
    assert_eq!(meta["kind"], "online");
    assert!(meta["steps"].as_u64().unwrap() > 0);
    let lines = fs::read_to_string(tmp.path().join("footprints.jsonl")).unwrap();
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("valid JSON line");
        assert!(v["timestamp_s"].is_number());
    }
}

#[test]
fn signal_recovers_injected_skew() {
    let tmp = tempfile::tempdir().unwrap();
    simulate_into("four_fn.json", tmp.path());
    run_ok(bin().args(["signal", "--dir", tmp.path().to_str().unwrap(), "--apply"]));
    let skew: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("skew.json")).unwrap()).unwrap();
    let offset = skew["skew"]["offset_s"].as_f64().unwrap();
    // four_fn injects 2 s of meter lag; the estimate must land within one
    // sample period of it.
    assert!((offset - 2.0).abs() <= 1.0, "estimated skew {offset}");
    assert!(tmp.path().join("system_aligned.csv").exists());
}

#[test]
fn validate_writes_report_and_csv() {
    let tmp = tempfile::tempdir().unwrap();
    run_ok(bin().args([
        "validate",
        "--scenario",
        scenario("four_fn.json").to_str().unwrap(),
        "--modes",
        "no-idle",
        "--out",
        tmp.path().to_str().unwrap(),
    ]));
    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("validation.json")).unwrap())
            .unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 1);
    let csv = fs::read_to_string(tmp.path().join("validation.csv")).unwrap();
    assert!(csv.starts_with("scenario,mode,function_id,"));
    assert_eq!(csv.lines().count(), 1 + 4, "one row per function");
}

#[test]
fn cap_writes_outputs_and_diagnoses_starvation() {
    let tmp = tempfile::tempdir().unwrap();
    run_ok(bin().args([
        "cap",
        "--scenario",
        scenario("capping.json").to_str().unwrap(),
        "--cap-watts",
        "60",
        "--out",
        tmp.path().to_str().unwrap(),
    ]));
    for name in ["cap_decisions.csv", "cap_executions.csv", "cap_power.csv", "cap_summary.json"] {
        assert!(tmp.path().join(name).exists(), "missing {name}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("cap_summary.json")).unwrap())
            .unwrap();
    assert!(summary["overshoot_fraction"].as_f64().unwrap() <= 0.03);

    let (code, stderr) = stderr_of(bin().args([
        "cap",
        "--scenario",
        scenario("capping.json").to_str().unwrap(),
        "--cap-watts",
        "10",
        "--out",
        tmp.path().join("starved").to_str().unwrap(),
    ]));
    assert_eq!(code, 2, "stderr: {stderr}");
    assert!(stderr.contains("starvation"), "starvation not diagnosed: {stderr}");
}

#[test]
fn report_stacks_energy_and_reproduces_cosine_verbatim() {
    let tmp = tempfile::tempdir().unwrap();
    simulate_into("four_fn.json", tmp.path());
    run_ok(bin().args([
        "profile",
        "--dir",
        tmp.path().to_str().unwrap(),
        "--mode",
        "no-idle",
        "--out",
        tmp.path().to_str().unwrap(),
    ]));
    run_ok(bin().args([
        "validate",
        "--scenario",
        scenario("four_fn.json").to_str().unwrap(),
        "--modes",
        "no-idle",
        "--out",
        tmp.path().to_str().unwrap(),
    ]));
    run_ok(bin().args(["report", "--dir", tmp.path().to_str().unwrap()]));

    // Stacked columns must sum to the predicted total in every window.
    let stacked = fs::read_to_string(tmp.path().join("stacked_energy.csv")).unwrap();
    let mut lines = stacked.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("window_start_s,window_end_s,idle_j"));
    assert!(header.ends_with(",total_j"));
    for line in lines {
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        let total = *cells.last().unwrap();
        let parts: f64 = cells[2..cells.len() - 1].iter().sum();
        assert!(
            (parts - total).abs() <= 1e-9 * total.abs().max(1.0),
            "stacked row does not sum: {line}"
        );
    }

    // Spectrum exists for offline profiles.
    let spectrum = fs::read_to_string(tmp.path().join("spectrum.csv")).unwrap();
    assert!(spectrum.starts_with("function_id,j_indiv,phi_cp,phi_idle,j_total,activations"));
    assert_eq!(spectrum.lines().count(), 1 + 4);

    // The metric summary carries the validation cosine through verbatim.
    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("validation.json")).unwrap())
            .unwrap();
    let cosine = reports[0]["cosine_similarity"].as_f64().unwrap();
    let summary = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    let row = summary.lines().nth(1).unwrap();
    assert_eq!(
        row.split(',').nth(2).unwrap(),
        fmt_f64(cosine),
        "cosine not reproduced verbatim: {row}"
    );
}

#[test]
fn report_on_empty_dir_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, stderr) = stderr_of(bin().args(["report", "--dir", tmp.path().to_str().unwrap()]));
    assert_eq!(code, 2, "stderr: {stderr}");
    assert!(stderr.contains("nothing to report"), "stderr: {stderr}");
}
