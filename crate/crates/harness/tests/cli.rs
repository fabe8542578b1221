use std::process::Command;

fn polystep(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_polystep")).args(args).current_dir(env!("CARGO_MANIFEST_DIR")).output().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(polystep(&["run", "missing.toml"]).status.code(), Some(2));
    assert_eq!(polystep(&["run", "missing.toml", "--bogus"]).status.code(), Some(2));
    assert_eq!(polystep(&["maxsat", "--generate", "m=3"]).status.code(), Some(2));
    assert_eq!(polystep(&["accept", "--filter", "nothing-matches"]).status.code(), Some(2));
}

#[test]
fn bad_config_key_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "task.kind = \"quadratic\"\ntask.dim = 3\nbudget.max_steps = 2\noptimiser.dp = 4\n").unwrap();
    let out = polystep(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("optimiser"));
}

#[test]
fn maxsat_emits_one_record() {
    let out = polystep(&["maxsat", "--generate", "n=50", "seed=3", "--budget", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let record: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(record["seed"], 3);
    assert_eq!(record["loss_trace"].as_array().unwrap().len(), 6);
    assert_eq!(record["metric_name"], "satisfied_fraction");
}

#[test]
fn run_writes_records_and_summarize_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let status = polystep(&["run", "../../configs/blobs_sign.toml", "--seed", "1", "--seed", "2", "--budget", "3", "--out", out.to_str().unwrap()]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let records: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(records.as_array().unwrap().len(), 2);

    let summary = polystep(&["summarize", out.to_str().unwrap()]);
    assert!(summary.status.success());
    let report: serde_json::Value = serde_json::from_slice(&summary.stdout).unwrap();
    assert_eq!(report["summaries"][0]["runs"], 2);
}
