use std::fs;
use std::path::Path;

use drllm_core::backend::{BackendConfig, BackendKind, HttpSettings, MockParams};
use drllm_core::evaluation::AnomalyMode;
use drllm_core::orchestrator::{
    report_from_trace, run_ablation, run_experiment, RunConfig, RunError, MANIFEST_FILE, OUTCOMES_FILE, TRACE_FILE,
};
use drllm_core::prompts::TemplateId;

fn config(out: &Path, records: usize) -> RunConfig {
    RunConfig {
        records: Some(records),
        output_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn call_counts_follow_stage_structure() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), 100);
    c.templates = vec![TemplateId::P0, TemplateId::P3];
    let summary = run_experiment(&c).unwrap();
    assert_eq!(summary.records.len(), 200);
    assert_eq!(summary.stats[0].backend_calls, 300);
    assert_eq!(summary.stats[0].requests, 300);
    assert_eq!(summary.failed, 0);
    // outcomes.csv is the header plus one line per record.
    assert_eq!(read(dir.path().join(OUTCOMES_FILE)).lines().count(), 201);
    assert_eq!(read(dir.path().join(TRACE_FILE)).lines().count(), 200);
}

#[test]
fn warm_cache_makes_no_calls_and_replays_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.log");
    let mut c = config(&dir.path().join("a"), 60).ablation();
    c.cache_path = Some(cache.clone());
    let first = run_experiment(&c).unwrap();
    // The knowledge prompt is the same for every record and for both
    // knowledge templates, so it reaches the backend once.
    assert_eq!(first.stats[0].requests, 60 * (1 + 1 + 1 + 2 + 2));
    assert_eq!(first.stats[0].backend_calls, 5 * 60 + 1);

    for (sub, limit) in [("b", 1), ("c", 8)] {
        let mut again = c.clone();
        again.output_dir = dir.path().join(sub);
        again.concurrency_limit = limit;
        let second = run_experiment(&again).unwrap();
        assert_eq!(second.stats[0].backend_calls, 0);
        assert_eq!(second.stats[0].cache_hits, second.stats[0].requests);
        for file in [OUTCOMES_FILE, "report.md", "report.csv"] {
            assert_eq!(
                read(dir.path().join("a").join(file)),
                read(dir.path().join(sub).join(file)),
                "{file}"
            );
        }
    }
}

#[test]
fn concurrency_is_deterministic_and_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for limit in [1, 3, 8] {
        let mut c = config(&dir.path().join(limit.to_string()), 40);
        c.templates = vec![TemplateId::P1, TemplateId::P3];
        c.concurrency_limit = limit;
        run_experiment(&c).unwrap();
        outputs.push(read(dir.path().join(limit.to_string()).join(OUTCOMES_FILE)));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn resumes_from_partial_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.log");
    let mut full = config(&dir.path().join("full"), 30);
    full.templates = vec![TemplateId::P2, TemplateId::P3];
    run_experiment(&full).unwrap();

    // Simulate an interrupted run: warm the cache with a smaller run,
    // then chop the file in the middle of an entry.
    let mut partial = full.clone();
    partial.output_dir = dir.path().join("partial");
    partial.cache_path = Some(cache.clone());
    partial.templates = vec![TemplateId::P2];
    run_experiment(&partial).unwrap();
    let bytes = fs::read(&cache).unwrap();
    fs::write(&cache, &bytes[..bytes.len() * 2 / 3]).unwrap();

    let mut resumed = full.clone();
    resumed.output_dir = dir.path().join("resumed");
    resumed.cache_path = Some(cache);
    let summary = run_experiment(&resumed).unwrap();
    assert!(summary.stats[0].cache_hits > 0);
    for file in [OUTCOMES_FILE, "report.md", "report.csv"] {
        assert_eq!(
            read(dir.path().join("full").join(file)),
            read(dir.path().join("resumed").join(file))
        );
    }
}

#[test]
fn report_from_trace_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), 50).ablation();
    c.backends.push(BackendConfig::mock(
        "noisy",
        MockParams {
            accuracy: 0.6,
            l1_rate: 0.2,
            l2_rate: 0.1,
            seed: 3,
        },
    ));
    let summary = run_ablation(&c).unwrap();
    let (report, empty) = report_from_trace(&dir.path().join(TRACE_FILE), AnomalyMode::Exclude).unwrap();
    assert!(empty.is_empty());
    assert_eq!(report, summary.report);
    assert_eq!(report.backends(), ["mock".to_string(), "noisy".to_string()]);
    assert_eq!(report.templates(), TemplateId::ALL.to_vec());

    let (misclassified, _) = report_from_trace(&dir.path().join(TRACE_FILE), AnomalyMode::Misclassify).unwrap();
    let strict = misclassified.cell("noisy", TemplateId::P3).unwrap();
    let lenient = report.cell("noisy", TemplateId::P3).unwrap();
    assert!(strict.confusion.total() > lenient.confusion.total());
}

#[test]
fn manifest_is_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), 20);
    run_experiment(&c).unwrap();
    let manifest = read(dir.path().join(MANIFEST_FILE));
    assert!(manifest.contains("input_sha256 = "));
    assert!(manifest.contains("block_text_version = "));
    let reloaded = drllm_core::orchestrator::parse_config(&manifest).unwrap();
    assert_eq!(reloaded.run, c);
}

#[test]
fn mock_sidecar_is_written() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&config(dir.path(), 25)).unwrap();
    let sidecar = read(dir.path().join("mock_sidecar_mock.jsonl"));
    assert_eq!(sidecar.lines().count(), 25);
    let first: serde_json::Value = serde_json::from_str(sidecar.lines().next().unwrap()).unwrap();
    assert!(first["emission"].is_string());
}

#[test]
fn unreachable_endpoint_aborts_at_error_ceiling() {
    let dir = tempfile::tempdir().unwrap();
    std::env::set_var("DRLLM_API_KEY_DEAD", "test-key");
    let mut settings = HttpSettings::new("http://127.0.0.1:9/v1/chat/completions", "DRLLM_API_KEY_DEAD");
    settings.max_retries = 0;
    settings.requests_per_second = 1000.0;
    let mut c = config(dir.path(), 30);
    c.templates = vec![TemplateId::P0];
    c.concurrency_limit = 2;
    c.backends = vec![BackendConfig {
        id: "dead".into(),
        model_name: "m".into(),
        temperature: None,
        max_output_tokens: None,
        kind: BackendKind::Http(settings),
    }];
    match run_experiment(&c) {
        Err(RunError::ErrorCeiling { failed, total, .. }) => {
            assert_eq!(total, 30);
            assert!(failed > 6 && failed < 30, "{failed}");
        }
        other => panic!("expected abort, got {other:?}"),
    }
    let trace = read(dir.path().join(TRACE_FILE));
    assert!(!trace.is_empty());
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["error"].as_str().unwrap().starts_with("stage2 failed"));
    }
}

#[test]
fn missing_api_key_names_the_variable() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), 5);
    c.backends = vec![drllm_core::orchestrator::http_preset("llama").unwrap()];
    std::env::remove_var("DRLLM_API_KEY_LLAMA");
    let err = run_experiment(&c).unwrap_err();
    assert!(err.to_string().contains("DRLLM_API_KEY_LLAMA"), "{err}");
}

#[test]
fn csv_dataset_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("flows.csv");
    let mut text = String::from("Flow ID, Timestamp, Flow Duration, Total Fwd Packets, Flow Bytes/s, Label\n");
    for i in 0..40 {
        let label = if i % 2 == 0 { "BENIGN" } else { "DrDoS_DNS" };
        let rate = if i == 5 {
            "Infinity".to_string()
        } else {
            format!("{}.5", i * 10)
        };
        text.push_str(&format!("f{i}, 2018-12-01, {}, {}, {rate}, {label}\n", 1000 + i, i % 7));
    }
    fs::write(&csv, text).unwrap();
    let mut c = config(&dir.path().join("out"), 20);
    c.dataset = Some(csv);
    c.features = vec!["Flow Duration".into(), "Flow Bytes/s".into()];
    c.templates = vec![TemplateId::P3];
    let summary = run_experiment(&c).unwrap();
    assert_eq!(summary.records.len(), 20);
    let manifest = read(dir.path().join("out").join(MANIFEST_FILE));
    assert!(manifest.contains("rows_dropped = 1"));
    let trace = read(dir.path().join("out").join(TRACE_FILE));
    let first: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    let token = first["token_text"].as_str().unwrap();
    assert!(
        token.starts_with("Flow Duration: ") && token.contains(", Flow Bytes/s: "),
        "{token}"
    );
}

#[test]
fn in_flight_calls_never_exceed_limit() {
    use drllm_core::backend::{ChatBackend, MockBackend};
    use drllm_core::orchestrator::{ground_truth, prepare_data, run_prepared};
    use std::time::Duration;

    let dir = tempfile::tempdir().unwrap();
    for limit in [1, 2, 5] {
        let mut c = config(&dir.path().join(limit.to_string()), 30);
        c.templates = vec![TemplateId::P0, TemplateId::P3Prime];
        c.concurrency_limit = limit;
        let data = prepare_data(&c).unwrap();
        let mock = MockBackend::new("mock", "mock", MockParams::default(), ground_truth(&data))
            .unwrap()
            .with_latency(Duration::from_millis(3));
        let backends: [&dyn ChatBackend; 1] = [&mock];
        run_prepared(&c, &data, &backends).unwrap();
        assert!(mock.max_in_flight() <= limit, "{} > {limit}", mock.max_in_flight());
        assert_eq!(mock.max_in_flight(), limit);
        assert_eq!(mock.calls(), 30 + 60);
    }
}
