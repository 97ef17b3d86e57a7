mod support;

use std::path::Path;
use std::sync::Arc;

use lab_anomaly::client::{MockFailure, MockProvider, MockRule, MockScript, ProviderConfig, ResponseCache, VlmClient};
use lab_anomaly::eval::{
    compute_by_level, load_manifest, read_results, run_eval, write_results, EvalError, GroundTruth, MetricMode, Outcome,
};
use lab_anomaly::workflow::load_workflow;
use lab_anomaly::{PromptLevel, Verdict, Workflow};
use support::write_png;

fn demo() -> Workflow {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/silicone_transfer_demo.json");
    load_workflow(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn levels(ls: &[u8]) -> Vec<PromptLevel> {
    ls.iter().map(|&l| PromptLevel::new(l).unwrap()).collect()
}

fn client(script: MockScript) -> (Arc<MockProvider>, VlmClient) {
    let mock = Arc::new(MockProvider::new(script));
    let cfg = ProviderConfig {
        backoff_base_s: 0.0,
        max_retries: 1,
        ..Default::default()
    };
    (mock.clone(), VlmClient::new(mock, cfg).unwrap())
}

/// Writes `n` images plus a manifest alternating normal/abnormal labels.
fn dataset(dir: &Path, n: usize) -> String {
    let mut manifest = String::new();
    for i in 0..n {
        let name = format!("img{i:02}.png");
        write_png(&dir.join(&name), i as u8);
        let label = if i % 2 == 0 { "normal" } else { "abnormal" };
        let point = if i % 3 == 0 { "p02" } else { "p01" };
        manifest.push_str(&format!(
            "{{\"sample_id\": \"s{i:02}\", \"image\": \"{name}\", \"point_id\": \"{point}\", \"label\": \"{label}\"}}\n"
        ));
    }
    manifest
}

#[test]
fn records_are_ordered_by_level_then_sample() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = "{\"sample_id\": \"b\", \"image\": \"x.png\", \"point_id\": \"p01\", \"label\": \"normal\"}\n\
                    {\"sample_id\": \"a\", \"image\": \"y.png\", \"point_id\": \"p02\", \"label\": \"abnormal\"}\n";
    write_png(&dir.path().join("x.png"), 1);
    write_png(&dir.path().join("y.png"), 2);
    let samples = load_manifest(manifest, Some(dir.path())).unwrap();
    let (mock, client) = client(
        MockScript::with_default("Conclusion: no anomaly detected.").rule(
            MockRule::respond("Conclusion: anomaly detected, bottle missing.")
                .for_point("p02")
                .at_level(4),
        ),
    );
    let records = run_eval(&demo(), &samples, &levels(&[4, 1]), &client, 4).unwrap();
    assert_eq!(mock.calls(), 4);
    let keys: Vec<(u8, &str)> = records.iter().map(|r| (r.level.get(), r.sample_id.as_str())).collect();
    assert_eq!(keys, vec![(1, "a"), (1, "b"), (4, "a"), (4, "b")]);
    // only the level-4 prompt for p02 flips the missed detection
    assert_eq!(records[0].outcome, Outcome::MissedDetection);
    assert_eq!(records[2].verdict, Verdict::Anomalous);
    assert_eq!(records[2].outcome, Outcome::Correct);
    assert!(records.iter().all(|r| r.error.is_none()));
}

#[test]
fn parallelism_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let samples = load_manifest(&dataset(dir.path(), 12), Some(dir.path())).unwrap();
    let script = MockScript::with_default("Conclusion: no anomaly detected.")
        .rule(
            MockRule::respond("Final answer: anomalous.")
                .for_image("img03.png")
                .with_latency_ms(5),
        )
        .rule(
            MockRule::respond("I cannot determine this.")
                .at_level(1)
                .for_point("p02"),
        )
        .rule(MockRule::respond("Verdict: abnormal").at_level(3).with_latency_ms(2));
    let all = levels(&[1, 2, 3, 4]);
    let (_, sequential) = client(script.clone());
    let (_, parallel) = client(script);
    let a = run_eval(&demo(), &samples, &all, &sequential, 1).unwrap();
    let b = run_eval(&demo(), &samples, &all, &parallel, 8).unwrap();
    assert_eq!(a.len(), 48);
    assert_eq!(write_results(&a), write_results(&b));
}

#[test]
fn provider_failures_fold_into_uncertain_records() {
    let dir = tempfile::tempdir().unwrap();
    let samples = load_manifest(&dataset(dir.path(), 4), Some(dir.path())).unwrap();
    let (mock, client) = client(
        MockScript::with_default("Conclusion: no anomaly detected.")
            .rule(MockRule::fail(MockFailure::Transient).for_image("img01.png"))
            .rule(MockRule::fail(MockFailure::Auth).for_image("img02.png")),
    );
    let records = run_eval(&demo(), &samples, &levels(&[2]), &client, 0).unwrap();
    // 2 retried attempts for the transient sample, 1 for auth, 1 each for the rest
    assert_eq!(mock.calls(), 2 + 1 + 2);
    let failed: Vec<&str> = records
        .iter()
        .filter(|r| r.error.is_some())
        .map(|r| r.sample_id.as_str())
        .collect();
    assert_eq!(failed, vec!["s01", "s02"]);
    for r in records.iter().filter(|r| r.error.is_some()) {
        assert_eq!(r.verdict, Verdict::Uncertain);
        assert_eq!(r.outcome, Outcome::Uncertain);
        assert_eq!(r.latency_s, 0.0);
        assert_eq!(r.request_hash.len(), 64);
    }
    let reread = read_results(&write_results(&records)).unwrap();
    assert_eq!(reread, records);
}

#[test]
fn configuration_problems_abort() {
    let dir = tempfile::tempdir().unwrap();
    let (_, client) = client(MockScript::with_default("Conclusion: no anomaly detected."));

    let unknown = "{\"sample_id\": \"a\", \"image\": \"a.png\", \"point_id\": \"p99\", \"label\": \"normal\"}";
    let samples = load_manifest(unknown, Some(dir.path())).unwrap();
    assert!(matches!(
        run_eval(&demo(), &samples, &levels(&[1]), &client, 1),
        Err(EvalError::UnknownPoint { .. })
    ));

    let missing = "{\"sample_id\": \"a\", \"image\": \"nope.png\", \"point_id\": \"p01\", \"label\": \"normal\"}";
    let samples = load_manifest(missing, Some(dir.path())).unwrap();
    match run_eval(&demo(), &samples, &levels(&[1]), &client, 1) {
        Err(EvalError::Image { sample, .. }) => assert_eq!(sample, "a"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn warm_cache_reproduces_results_without_calls() {
    let dir = tempfile::tempdir().unwrap();
    let cache = tempfile::tempdir().unwrap();
    let samples = load_manifest(&dataset(dir.path(), 6), Some(dir.path())).unwrap();
    let script = MockScript::with_default("Conclusion: no anomaly detected.").rule(
        MockRule::respond("Conclusion: anomaly detected.")
            .for_image("img04.png")
            .with_latency_ms(3),
    );
    let run = |script: MockScript| {
        let mock = Arc::new(MockProvider::new(script));
        let client = VlmClient::new(mock.clone(), ProviderConfig::default())
            .unwrap()
            .with_cache(ResponseCache::new(cache.path()));
        let records = run_eval(&demo(), &samples, &levels(&[1, 3]), &client, 3).unwrap();
        (mock.calls(), write_results(&records))
    };
    let (cold_calls, cold) = run(script.clone());
    let (warm_calls, warm) = run(script);
    assert_eq!(cold_calls, 12);
    assert_eq!(warm_calls, 0);
    assert_eq!(cold, warm);
}

#[test]
fn metrics_per_level_from_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let samples = load_manifest(&dataset(dir.path(), 8), Some(dir.path())).unwrap();
    assert_eq!(
        samples
            .iter()
            .filter(|s| s.ground_truth == GroundTruth::Abnormal)
            .count(),
        4
    );
    // everything judged normal: every abnormal sample is a missed detection
    let (_, client) = client(MockScript::with_default("Conclusion: no anomaly detected."));
    let records = run_eval(&demo(), &samples, &levels(&[1, 2]), &client, 2).unwrap();
    let reports = compute_by_level(&records, MetricMode::ClassConditional).unwrap();
    assert_eq!(reports.len(), 2);
    for r in reports {
        assert_eq!((r.acc, r.fpr, r.mdr, r.ur), (50.0, 0.0, 100.0, 0.0));
    }
}
