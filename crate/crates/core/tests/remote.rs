mod common;

use std::time::Duration;

use sapo_core::reasoner::remote::{RemoteClient, RemoteConfig, RemoteError};
use sapo_core::reasoner::{AnswerExtractor, Reasoner, RemoteReasoner, RolloutCount};
use sapo_core::{Error, Question, TrajectorySource};

fn client(endpoint: String, model: &str) -> RemoteClient {
    let mut cfg = RemoteConfig::new(endpoint, model);
    cfg.backoff_base = Duration::from_millis(5);
    cfg.max_retries = 3;
    cfg.timeout = Duration::from_secs(5);
    RemoteClient::new(cfg).unwrap()
}

#[test]
fn success_returns_every_choice() {
    let server = common::mock::start();
    let c = client(server.endpoint(), "ok").remote_sample("q", 3, 0.7).unwrap();
    assert_eq!(c.texts.len(), 3);
    assert_eq!(c.retries, 0);
    assert_eq!(c.texts[0], common::mock::SOLUTION);
}

#[test]
fn rate_limit_is_retried() {
    let server = common::mock::start();
    let c = client(server.endpoint(), "flaky").remote_sample("q", 2, 1.0).unwrap();
    assert_eq!(c.texts.len(), 2);
    assert_eq!(c.retries, 2);
    assert_eq!(server.requests(), 3);
}

#[test]
fn malformed_body_is_a_parse_error_without_retry() {
    let server = common::mock::start();
    let err = client(server.endpoint(), "broken").remote_sample("q", 1, 1.0).unwrap_err();
    assert!(matches!(err, RemoteError::Parse(_)), "{err}");
    assert_eq!(server.requests(), 1);
}

#[test]
fn server_errors_exhaust_retries() {
    let server = common::mock::start();
    let err = client(server.endpoint(), "down").remote_sample("q", 1, 1.0).unwrap_err();
    assert!(matches!(err, RemoteError::Http { status: 500, .. }), "{err}");
    assert_eq!(server.requests(), 4);
}

#[test]
fn client_errors_fail_fast() {
    let server = common::mock::start();
    let err = client(server.endpoint(), "nope").remote_sample("q", 1, 1.0).unwrap_err();
    assert!(matches!(err, RemoteError::Http { status: 400, .. }));
    assert_eq!(server.requests(), 1);
}

#[test]
fn unreachable_endpoint_is_a_network_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let mut cfg = RemoteConfig::new(format!("http://{addr}"), "ok");
    cfg.max_retries = 1;
    cfg.backoff_base = Duration::from_millis(1);
    let err = RemoteClient::new(cfg).unwrap().remote_sample("q", 1, 1.0).unwrap_err();
    assert!(matches!(err, RemoteError::Network { .. } | RemoteError::Timeout { .. }), "{err}");
}

#[test]
fn short_responses_are_topped_up() {
    let server = common::mock::start();
    let c = client(server.endpoint(), "short").remote_sample("q", 3, 1.0).unwrap();
    assert_eq!(c.texts.len(), 3);
    assert_eq!(server.requests(), 3);
}

#[test]
fn audit_log_records_every_attempt() {
    let server = common::mock::start();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("audit.jsonl");
    let mut cfg = RemoteConfig::new(server.endpoint(), "flaky");
    cfg.backoff_base = Duration::from_millis(1);
    cfg.audit_path = Some(log.clone());
    RemoteClient::new(cfg).unwrap().remote_sample("q", 1, 1.0).unwrap();
    let lines: Vec<serde_json::Value> =
        std::fs::read_to_string(&log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["status"], 429);
    assert_eq!(lines[2]["status"], 200);
    assert_eq!(lines[2]["request"]["model"], "flaky");
}

#[test]
fn reasoner_segments_steps_and_extracts_answers() {
    let server = common::mock::start();
    let r = RemoteReasoner::new(client(server.endpoint(), "ok"), AnswerExtractor::default());
    let q = Question::new("q1", "What is (2+3)*2?", "10").unwrap();
    let (ts, ledger) = r.sample(&q, 2, 0.7, 1).unwrap();
    assert_eq!(ts.len(), 2);
    assert_eq!(ts[0].steps.len(), 3);
    assert_eq!(ts[0].final_answer, "10");
    assert!(q.is_correct(&ts[0].final_answer));
    assert_eq!(ledger.rollouts, 2);

    let prefix = vec!["Add 2 and 3 to get 5.".to_string()];
    let res = r.rollout(&q, &prefix, RolloutCount::Sampled(2), 0.7, 1).unwrap();
    assert!(res.completions.iter().all(|c| c.steps[0] == prefix[0] && c.source == TrajectorySource::RolloutExtension));
    assert_eq!(res.ledger.rollout_batches, 1);
    assert!(matches!(r.rollout(&q, &prefix, RolloutCount::Exhaustive, 0.7, 1), Err(Error::InvalidArgument(_))));
}

#[test]
fn config_reads_endpoint_from_environment() {
    // the only test touching these variables
    std::env::set_var("SAPO_ENDPOINT", "http://127.0.0.1:9");
    std::env::set_var("SAPO_API_KEY", "k");
    let cfg = RemoteConfig::from_env("m").unwrap();
    assert_eq!(cfg.endpoint, "http://127.0.0.1:9");
    assert_eq!(cfg.api_key.as_deref(), Some("k"));
    std::env::remove_var("SAPO_ENDPOINT");
    assert!(RemoteConfig::from_env("m").unwrap_err().is_config());
}
