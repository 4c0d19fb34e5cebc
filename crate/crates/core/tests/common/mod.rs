//! In-process OpenAI-style streaming server with scripted timing.

#![allow(dead_code)]

use std::convert::Infallible;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy)]
pub struct Script {
    /// Delay before the first content chunk.
    pub first_delay: Duration,
    /// Delay between later content chunks.
    pub interval: Duration,
    pub chunks: u32,
    pub status: u16,
    /// Report `completion_tokens` in a final usage chunk.
    pub usage: bool,
}

impl Script {
    pub fn steady(chunks: u32, interval_ms: u64) -> Self {
        Self {
            first_delay: Duration::from_millis(interval_ms),
            interval: Duration::from_millis(interval_ms),
            chunks,
            status: 200,
            usage: true,
        }
    }
}

async fn models() -> Json<Value> {
    Json(json!({"object": "list", "data": [{"id": "mock"}]}))
}

fn event(v: Value) -> Bytes {
    Bytes::from(format!("data: {v}\n\n"))
}

async fn completions(State(script): State<Script>, Json(body): Json<Value>) -> Response {
    if script.status != 200 {
        let code = StatusCode::from_u16(script.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        return (code, "scripted failure").into_response();
    }
    assert_eq!(body["stream"], json!(true));
    let stream = futures::stream::unfold(0u32, move |i| async move {
        if i > script.chunks + 1 {
            return None;
        }
        let bytes = if i == 0 {
            event(json!({"choices": [{"index": 0, "delta": {"role": "assistant"}}]}))
        } else if i <= script.chunks {
            let delay = if i == 1 { script.first_delay } else { script.interval };
            tokio::time::sleep(delay).await;
            event(json!({"choices": [{"index": 0, "delta": {"content": format!("t{i} ")}}]}))
        } else if script.usage {
            let mut b = event(json!({"choices": [], "usage": {"completion_tokens": script.chunks}})).to_vec();
            b.extend_from_slice(b"data: [DONE]\n\n");
            Bytes::from(b)
        } else {
            Bytes::from_static(b"data: [DONE]\n\n")
        };
        Some((Ok::<_, Infallible>(bytes), i + 1))
    });
    Response::builder()
        .header("content-type", "text/event-stream")
        .body(Body::from_stream(stream))
        .expect("response")
}

/// Starts the server on its own runtime thread and returns its `/v1` base URL.
pub fn spawn_mock(script: Script) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("runtime");
        rt.block_on(async move {
            let app = Router::new()
                .route("/v1/models", get(models))
                .route("/v1/chat/completions", post(completions))
                .with_state(script);
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind");
            tx.send(listener.local_addr().expect("addr")).expect("send addr");
            axum::serve(listener, app).await.expect("serve");
        });
    });
    let addr = rx.recv().expect("mock server address");
    format!("http://{addr}/v1")
}

/// An address nothing listens on.
pub fn dead_url() -> String {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").expect("bind");
    let addr = listener.local_addr().expect("addr");
    drop(listener);
    format!("http://{addr}/v1")
}
