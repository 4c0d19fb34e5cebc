//! Streaming client for OpenAI-compatible chat-completion endpoints.
//!
//! Timing is captured on the client with a monotonic clock: the first content
//! chunk stamps the first token and the end of the stream stamps completion.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::backend::{BackendError, Driver, InferenceBackend, LiveDriver, PromptRequest, StreamingClient};
use crate::model::{RequestRecord, RequestStatus, ValidationError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Everything before `/chat/completions`, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    /// Seconds allowed for the health probe and connection setup.
    #[serde(default = "defaults::timeout")]
    pub timeout: f64,
    #[serde(default = "defaults::max_connections")]
    pub max_connections: usize,
    /// Sends vLLM's `ignore_eos` so every request generates `max_tokens`.
    #[serde(default)]
    pub ignore_eos: bool,
}

mod defaults {
    pub fn timeout() -> f64 {
        10.0
    }
    pub fn max_connections() -> usize {
        512
    }
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            timeout: defaults::timeout(),
            max_connections: defaults::max_connections(),
            ignore_eos: false,
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.base_url.trim().is_empty() {
            return Err(ValidationError::new("base_url", "empty"));
        }
        if !(self.timeout > 0.0 && self.timeout.is_finite()) {
            return Err(ValidationError::new("timeout", "must be positive"));
        }
        if self.max_connections == 0 {
            return Err(ValidationError::new("max_connections", "must be at least 1"));
        }
        Ok(())
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.base_url.trim_end_matches('/'))
    }
}

/// Renders prompt tokens as space-separated integers.
pub fn render_prompt(request: &PromptRequest) -> String {
    let tokens = request.tokens();
    let mut out = String::with_capacity(tokens.len() * 6);
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&t.to_string());
    }
    out
}

pub struct HttpClient {
    config: EndpointConfig,
    client: reqwest::Client,
    permits: Semaphore,
}

#[derive(Default)]
struct StreamState {
    buffer: Vec<u8>,
    first_token: Option<Instant>,
    content_chunks: u32,
    usage_tokens: Option<u32>,
}

impl StreamState {
    /// Consumes complete SSE lines from the buffer.
    fn feed(&mut self, bytes: &[u8], now: Instant) {
        self.buffer.extend_from_slice(bytes);
        while let Some(pos) = self.buffer.iter().position(|&b| b == b'\n') {
            let line: Vec<u8> = self.buffer.drain(..=pos).collect();
            let line = String::from_utf8_lossy(&line);
            let Some(data) = line.trim().strip_prefix("data:") else { continue };
            let data = data.trim();
            if data == "[DONE]" {
                continue;
            }
            let Ok(event) = serde_json::from_str::<Value>(data) else { continue };
            let has_content = event["choices"]
                .as_array()
                .is_some_and(|choices| choices.iter().any(|c| c["delta"]["content"].as_str().is_some_and(|s| !s.is_empty())));
            if has_content {
                self.first_token.get_or_insert(now);
                self.content_chunks += 1;
            }
            if let Some(n) = event["usage"]["completion_tokens"].as_u64() {
                self.usage_tokens = Some(n as u32);
            }
        }
    }
}

impl HttpClient {
    pub fn new(config: EndpointConfig) -> Result<Self, BackendError> {
        config.validate().map_err(|e| BackendError::Construction(e.to_string()))?;
        let client = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs_f64(config.timeout))
            .pool_max_idle_per_host(config.max_connections)
            .build()
            .map_err(|e| BackendError::Construction(e.to_string()))?;
        let permits = Semaphore::new(config.max_connections);
        Ok(Self { config, client, permits })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn body(&self, request: &PromptRequest) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": render_prompt(request)}],
            "max_tokens": request.output_len,
            "stream": true,
            "stream_options": {"include_usage": true},
        });
        if self.config.ignore_eos {
            body["ignore_eos"] = Value::Bool(true);
        }
        body
    }

    fn authorize(&self, builder: reqwest::RequestBuilder) -> reqwest::RequestBuilder {
        match &self.config.api_key {
            Some(key) => builder.bearer_auth(key),
            None => builder,
        }
    }

    pub async fn health(&self) -> Result<(), BackendError> {
        let request = self.authorize(self.client.get(self.config.url("models")));
        let response = tokio::time::timeout(Duration::from_secs_f64(self.config.timeout), request.send())
            .await
            .map_err(|_| BackendError::Unavailable(format!("{} did not answer", self.config.base_url)))?
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        if response.status().is_success() {
            Ok(())
        } else {
            Err(BackendError::Unavailable(format!("health probe returned {}", response.status())))
        }
    }

    async fn stream(&self, request: &PromptRequest) -> Result<(Instant, Option<Instant>, u32), String> {
        let _permit = self.permits.acquire().await.map_err(|e| e.to_string())?;
        let builder = self.authorize(self.client.post(self.config.url("chat/completions"))).json(&self.body(request));
        let mut response = builder.send().await.map_err(|e| e.to_string())?;
        if !response.status().is_success() {
            return Err(format!("status {}", response.status()));
        }
        let mut state = StreamState::default();
        while let Some(bytes) = response.chunk().await.map_err(|e| e.to_string())? {
            state.feed(&bytes, Instant::now());
        }
        state.feed(b"\n", Instant::now());
        let done = Instant::now();
        Ok((done, state.first_token, state.usage_tokens.unwrap_or(state.content_chunks)))
    }
}

#[async_trait::async_trait]
impl StreamingClient for HttpClient {
    async fn send(&self, request: PromptRequest, trial_start: Instant, timeout: Duration) -> RequestRecord {
        let arrival_at = Instant::now();
        let since = |t: Instant| t.saturating_duration_since(trial_start).as_secs_f64();
        let arrival = since(arrival_at);
        match tokio::time::timeout_at((arrival_at + timeout).into(), self.stream(&request)).await {
            Err(_) => RequestRecord::failed(request.id, arrival, RequestStatus::Timeout),
            Ok(Err(e)) => {
                log::debug!("request {} failed: {e}", request.id);
                RequestRecord::failed(request.id, arrival, RequestStatus::Error)
            }
            Ok(Ok((_, None, _))) => RequestRecord::failed(request.id, arrival, RequestStatus::Error),
            Ok(Ok((done, Some(first), tokens))) => {
                RequestRecord::ok(request.id, arrival, since(first), since(done), tokens.max(1))
            }
        }
    }
}

/// An externally managed endpoint.
pub struct HttpBackend {
    runtime: tokio::runtime::Runtime,
    client: Arc<HttpClient>,
}

impl HttpBackend {
    pub fn new(config: EndpointConfig) -> Result<Self, BackendError> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .map_err(|e| BackendError::Construction(e.to_string()))?;
        let client = runtime.block_on(async { HttpClient::new(config) })?;
        Ok(Self { runtime, client: Arc::new(client) })
    }

    pub fn client(&self) -> &HttpClient {
        &self.client
    }
}

impl InferenceBackend for HttpBackend {
    fn describe(&self) -> String {
        format!("http {} ({})", self.client.config.base_url, self.client.config.model)
    }

    fn health_check(&mut self) -> Result<(), BackendError> {
        self.runtime.block_on(self.client.health())
    }

    fn driver(&mut self) -> Driver<'_> {
        Driver::Live(LiveDriver { runtime: &self.runtime, client: self.client.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_split_sse_lines() {
        let mut s = StreamState::default();
        let t0 = Instant::now();
        s.feed(b"data: {\"choices\":[{\"delta\":{\"role\":\"assistant\"}}]}\n\nda", t0);
        assert_eq!(s.content_chunks, 0);
        s.feed(b"ta: {\"choices\":[{\"delta\":{\"content\":\"a\"}}]}\n\n", t0 + Duration::from_millis(5));
        s.feed(b"data: {\"choices\":[],\"usage\":{\"completion_tokens\":7}}\n\ndata: [DONE]\n\n", t0);
        assert_eq!(s.first_token, Some(t0 + Duration::from_millis(5)));
        assert_eq!(s.content_chunks, 1);
        assert_eq!(s.usage_tokens, Some(7));
    }

    #[test]
    fn prompt_rendering_shares_prefix() {
        let a = PromptRequest { id: 1, input_len: 20, output_len: 4, prefix_len: 8, seed: 3 };
        let b = PromptRequest { id: 2, ..a.clone() };
        let (ra, rb) = (render_prompt(&a), render_prompt(&b));
        let head = |s: &str| s.split(' ').take(8).collect::<Vec<_>>().join(" ");
        assert_eq!(head(&ra), head(&rb));
        assert_ne!(ra, rb);
        assert_eq!(ra.split(' ').count(), 20);
    }

    #[test]
    fn config_validation() {
        assert!(EndpointConfig::new("", "m").validate().is_err());
        let mut c = EndpointConfig::new("http://x/v1", "m");
        c.timeout = 0.0;
        assert!(c.validate().is_err());
        assert_eq!(EndpointConfig::new("http://x/v1/", "m").url("models"), "http://x/v1/models");
    }
}
