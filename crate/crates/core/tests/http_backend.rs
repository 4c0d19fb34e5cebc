mod common;

use std::time::{Duration, Instant};

use common::{dead_url, spawn_mock, Script};
use servetune::backend::{BackendError, InferenceBackend, PromptRequest, StreamingClient};
use servetune::http::{EndpointConfig, HttpBackend, HttpClient};
use servetune::model::RequestStatus;

fn request() -> PromptRequest {
    PromptRequest { id: 0, input_len: 32, output_len: 5, prefix_len: 0, seed: 1 }
}

fn send(client: &HttpClient, timeout: Duration) -> servetune::model::RequestRecord {
    let rt = tokio::runtime::Runtime::new().unwrap();
    rt.block_on(client.send(request(), Instant::now(), timeout))
}

#[test]
fn five_chunks_at_ten_ms() {
    let url = spawn_mock(Script::steady(5, 10));
    let client = HttpClient::new(EndpointConfig::new(url, "mock")).unwrap();
    let r = send(&client, Duration::from_secs(5));
    assert_eq!(r.status, RequestStatus::Ok);
    assert_eq!(r.output_tokens, 5);
    let (ttft, tpot) = (r.ttft().unwrap(), r.tpot().unwrap());
    assert!((ttft - 0.010).abs() < 0.008, "ttft {ttft}");
    assert!((tpot - 0.010).abs() < 0.005, "tpot {tpot}");
    assert!(r.arrival_ts <= r.first_token_ts.unwrap() && r.first_token_ts <= r.completion_ts);
}

#[test]
fn counts_chunks_without_usage() {
    let url = spawn_mock(Script { usage: false, ..Script::steady(3, 1) });
    let client = HttpClient::new(EndpointConfig::new(url, "mock")).unwrap();
    assert_eq!(send(&client, Duration::from_secs(5)).output_tokens, 3);
}

#[test]
fn non_2xx_is_error() {
    let url = spawn_mock(Script { status: 503, ..Script::steady(5, 1) });
    let client = HttpClient::new(EndpointConfig::new(url, "mock")).unwrap();
    let r = send(&client, Duration::from_secs(5));
    assert_eq!(r.status, RequestStatus::Error);
    assert!(r.first_token_ts.is_none() && r.completion_ts.is_none());
}

#[test]
fn stall_is_timeout() {
    let url = spawn_mock(Script { first_delay: Duration::from_secs(3), ..Script::steady(2, 1) });
    let client = HttpClient::new(EndpointConfig::new(url, "mock")).unwrap();
    let started = Instant::now();
    let r = send(&client, Duration::from_millis(200));
    assert_eq!(r.status, RequestStatus::Timeout);
    assert!(started.elapsed() < Duration::from_secs(2));
}

#[test]
fn health_probe() {
    let mut live = HttpBackend::new(EndpointConfig::new(spawn_mock(Script::steady(1, 1)), "mock")).unwrap();
    assert!(live.health_check().is_ok());
    let mut dead = HttpBackend::new(EndpointConfig::new(dead_url(), "mock")).unwrap();
    assert!(matches!(dead.health_check(), Err(BackendError::Unavailable(_))));
}
