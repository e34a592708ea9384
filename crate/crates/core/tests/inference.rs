use std::path::Path;
use std::time::Duration;

use nluprompt::corpus::read_instances_jsonl;
use nluprompt::infer::{
    run_benchmark, BenchmarkRun, ChatClient, InferenceConfig, MockOptions, MockReply, MockServer, RetryPolicy,
};
use nluprompt::types::NluInstance;
use nluprompt::RenderOptions;

fn fixture() -> Vec<NluInstance> {
    read_instances_jsonl(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mixed30.jsonl")).unwrap()
}

fn run(server: &MockServer, instances: &[NluInstance], tweak: impl FnOnce(&mut InferenceConfig)) -> BenchmarkRun {
    let mut cfg = InferenceConfig::new(server.url(), "mock");
    cfg.retry = RetryPolicy { max_attempts: 2, backoff_base_ms: 1 };
    tweak(&mut cfg);
    let client = ChatClient::new(cfg).unwrap();
    tokio::runtime::Runtime::new()
        .unwrap()
        .block_on(run_benchmark(instances, &client, None, &RenderOptions::default()))
        .unwrap()
}

#[test]
fn in_flight_requests_respect_the_limit() {
    let server = MockServer::start_with(
        |_| MockReply::Text("None".into()),
        MockOptions { script: vec![], delay: Duration::from_millis(20) },
    );
    let instances = fixture();
    let out = run(&server, &instances, |c| c.max_concurrent_requests = 3);
    assert_eq!(server.request_count(), instances.len());
    assert!(server.max_in_flight() <= 3, "{}", server.max_in_flight());
    assert!(server.max_in_flight() >= 2);
    assert_eq!(out.predictions.len(), instances.len());
}

#[test]
fn failed_requests_leave_a_partial_run() {
    let server = MockServer::start(|prompt| {
        if prompt.contains("Premise:") {
            MockReply::Status(503)
        } else {
            MockReply::Text("None".into())
        }
    });
    let instances = fixture();
    let out = run(&server, &instances, |_| {});
    assert!(out.is_partial());
    assert_eq!(out.manifest.n_failed, 3);
    assert_eq!(out.manifest.n_completed, instances.len() - 3);
    assert!((out.manifest.coverage - 27.0 / 30.0).abs() < 1e-12);
    let failed: Vec<&str> = out.prompts.iter().filter(|p| p.error.is_some()).map(|p| p.instance_id.as_str()).collect();
    assert_eq!(failed, vec!["nli-0", "nli-1", "nli-2"]);
    assert!(out.prompts.iter().filter(|p| p.error.is_some()).all(|p| p.attempts == 2));
    assert_eq!(out.predictions.len(), instances.len());
}

#[test]
fn truncated_completions_are_listed() {
    let server = MockServer::start(|prompt| {
        if prompt.starts_with("Summarize") {
            MockReply::Truncated("Knee pain".into())
        } else {
            MockReply::Text("None".into())
        }
    });
    let out = run(&server, &fixture(), |c| c.max_output_tokens = 8);
    assert_eq!(out.manifest.truncated, vec!["sum-0".to_string()]);
    assert_eq!(server.requests()[0].body["max_tokens"], 8);
}

#[test]
fn api_key_is_sent_as_bearer_token() {
    std::env::set_var("NLUPROMPT_TEST_KEY", "sk-test");
    let server = MockServer::start(|_| MockReply::Text("None".into()));
    run(&server, &fixture()[..1], |c| c.api_key_env_var = Some("NLUPROMPT_TEST_KEY".into()));
    assert_eq!(server.requests()[0].authorization.as_deref(), Some("Bearer sk-test"));
}
