use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn drllm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drllm"))
        .args(args)
        .current_dir(dir)
        .env_remove("DRLLM_RECORDS")
        .env_remove("DRLLM_CACHE")
        .env_remove("DRLLM_OUTPUT")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn version_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let v = drllm(dir.path(), &["--version"]);
    assert!(v.status.success());
    assert!(stdout(&v).starts_with("drllm "));
    assert_eq!(drllm(dir.path(), &["run", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(drllm(dir.path(), &["frobnicate"]).status.code(), Some(2));
    let bad = drllm(dir.path(), &["run", "--template", "P9", "--records", "5"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("P9"));
}

#[test]
fn synth_preprocess_profile_render() {
    let dir = tempfile::tempdir().unwrap();
    assert!(drllm(dir.path(), &["synth", "--records", "40", "--output", "s.csv"])
        .status
        .success());
    let pre = drllm(
        dir.path(),
        &[
            "preprocess",
            "--input",
            "s.csv",
            "--output",
            "c.csv",
            "--features",
            "Flow Duration,Protocol",
        ],
    );
    assert!(pre.status.success(), "{}", stderr(&pre));
    assert!(stdout(&pre).contains("rows_in: 40"));
    assert!(fs::read_to_string(dir.path().join("c.csv"))
        .unwrap()
        .starts_with("Flow Duration,Protocol,"));

    let profile = drllm(dir.path(), &["profile", "--dataset", "c.csv", "--all-records"]);
    let lines: Vec<String> = stdout(&profile).lines().map(String::from).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("Flow Duration -> Max: "));
    let csv = drllm(dir.path(), &["profile", "--dataset", "c.csv", "--format", "csv"]);
    assert!(stdout(&csv).starts_with("feature,max,min,median,mean,variance\n"));

    let p0 = stdout(&drllm(
        dir.path(),
        &["render", "--template", "P0", "--dataset", "c.csv", "--record", "3"],
    ));
    assert!(!p0.contains("=== stage1 ==="));
    assert!(p0.contains("Flow Duration: "));
    let p3 = stdout(&drllm(dir.path(), &["render", "--dataset", "c.csv"]));
    assert!(p3.contains("=== stage1 ===") && p3.contains("=== stage2 ==="));
    let out_of_range = drllm(dir.path(), &["render", "--dataset", "c.csv", "--record", "99"]);
    assert_eq!(out_of_range.status.code(), Some(1));
}

#[test]
fn ablate_then_replay_from_manifest_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let first = drllm(dir.path(), &["ablate", "--records", "60", "--output", "a"]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("| mock | F1 |"));
    assert!(stderr(&first).contains("420 requests, 119 cache hits, 301 backend calls"));
    assert!(dir.path().join("a/responses.cache").exists());

    // The manifest is a config; rerunning it hits the cache only.
    let again = drllm(
        dir.path(),
        &[
            "run",
            "--config",
            "a/run_manifest",
            "--output",
            "b",
            "--concurrency",
            "8",
        ],
    );
    assert!(again.status.success(), "{}", stderr(&again));
    assert!(stderr(&again).contains("0 backend calls"), "{}", stderr(&again));
    for f in ["outcomes.csv", "report.md", "report.csv"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }

    let report = drllm(dir.path(), &["report", "--from-trace", "a/trace.log", "--output", "r"]);
    assert!(report.status.success());
    assert_eq!(
        fs::read(dir.path().join("a/report.md")).unwrap(),
        fs::read(dir.path().join("r/report.md")).unwrap()
    );
}

#[test]
fn no_cache_and_template_selection() {
    let dir = tempfile::tempdir().unwrap();
    let o = drllm(
        dir.path(),
        &[
            "run",
            "--records",
            "30",
            "--no-cache",
            "--template",
            "P0",
            "--template",
            "P3",
            "--output",
            "o",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(
        stderr(&o).contains("90 requests, 0 cache hits, 90 backend calls"),
        "{}",
        stderr(&o)
    );
    assert!(!dir.path().join("o/responses.cache").exists());
    assert!(stdout(&o).contains("| P0 | P3 |"));
}

#[test]
fn failed_cells_exit_with_incomplete_status() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("dead.toml"),
        "backends = [\"dead\"]\n\n[backend.dead]\nkind = \"http\"\nmodel = \"m\"\nendpoint = \"http://127.0.0.1:9/v1/chat/completions\"\nmax_retries = 0\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_drllm"))
        .args([
            "run",
            "--config",
            "dead.toml",
            "--records",
            "4",
            "--template",
            "P0",
            "--error-ceiling",
            "1",
        ])
        .args(["--no-cache", "--output", "o"])
        .current_dir(dir.path())
        .env("DRLLM_API_KEY_DEAD", "test")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("not applicable: dead / P0"));

    let aborted = Command::new(env!("CARGO_BIN_EXE_drllm"))
        .args([
            "run",
            "--config",
            "dead.toml",
            "--records",
            "4",
            "--template",
            "P0",
            "--no-cache",
            "--output",
            "p",
        ])
        .current_dir(dir.path())
        .env("DRLLM_API_KEY_DEAD", "test")
        .output()
        .unwrap();
    assert_eq!(aborted.status.code(), Some(1));
    assert!(stderr(&aborted).contains("error ceiling"));

    let missing = Command::new(env!("CARGO_BIN_EXE_drllm"))
        .args(["run", "--config", "dead.toml", "--records", "4", "--output", "q"])
        .current_dir(dir.path())
        .env_remove("DRLLM_API_KEY_DEAD")
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("DRLLM_API_KEY_DEAD"));
}
