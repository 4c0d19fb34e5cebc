//! The contract between load generation and an inference server.
//!
//! Backends come in two flavours. Virtual-clock backends expose a
//! [`VirtualServer`] that the load generator drives event by event, so a
//! sixty-second trial costs no wall-clock time. Live backends expose an async
//! [`StreamingClient`] plus the runtime to drive it on.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LoadPattern, RequestRecord};

pub const VOCAB_SIZE: u32 = 32_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend construction failed: {0}")]
    Construction(String),
}

/// One synthetic request. Prompt tokens are derived on demand from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub id: u64,
    pub input_len: u32,
    pub output_len: u32,
    pub prefix_len: u32,
    pub seed: u64,
}

impl PromptRequest {
    pub fn from_pattern(pattern: &LoadPattern, id: u64) -> Self {
        Self {
            id,
            input_len: pattern.input_len,
            output_len: pattern.output_len,
            prefix_len: pattern.prefix_len,
            seed: pattern.seed,
        }
    }

    /// Key identifying the shared prefix, if there is one.
    pub fn prefix_key(&self) -> Option<u64> {
        (self.prefix_len > 0).then(|| self.seed ^ (u64::from(self.prefix_len) << 32))
    }

    /// Pseudorandom token IDs; the first `prefix_len` are identical across
    /// every request built from the same pattern.
    pub fn tokens(&self) -> Vec<u32> {
        let mut tokens = Vec::with_capacity(self.input_len as usize);
        let mut prefix_rng = ChaCha8Rng::seed_from_u64(self.seed);
        prefix_rng.set_stream(u64::MAX);
        tokens.extend((0..self.prefix_len).map(|_| prefix_rng.random_range(0..VOCAB_SIZE)));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.id);
        tokens.extend((self.prefix_len..self.input_len).map(|_| rng.random_range(0..VOCAB_SIZE)));
        tokens
    }
}

/// A server simulated on a virtual clock.
///
/// Timestamps are seconds since the last [`reset`](VirtualServer::reset).
pub trait VirtualServer {
    /// Clears all queues, caches and the clock.
    fn reset(&mut self);
    /// Enqueues a request arriving at `arrival` (not earlier than the clock).
    fn submit(&mut self, request: PromptRequest, arrival: f64);
    /// Processes every event up to `until` inclusive.
    fn run_until(&mut self, until: f64);
    /// Processes events until nothing is queued or running, or `limit` is reached.
    fn run_until_idle(&mut self, limit: f64);
    /// Records finished (or rejected) since the last call.
    fn take_finished(&mut self) -> Vec<RequestRecord>;
    fn now(&self) -> f64;
}

#[async_trait::async_trait]
pub trait StreamingClient: Send + Sync {
    /// Issues one request. Never retries; a stall beyond `timeout` yields a
    /// TIMEOUT record. Timestamps are relative to `trial_start`.
    async fn send(&self, request: PromptRequest, trial_start: Instant, timeout: Duration) -> RequestRecord;
}

pub struct LiveDriver<'a> {
    pub runtime: &'a tokio::runtime::Runtime,
    pub client: Arc<dyn StreamingClient>,
}

pub enum Driver<'a> {
    Virtual(&'a mut dyn VirtualServer),
    Live(LiveDriver<'a>),
}

pub trait InferenceBackend: Send {
    fn describe(&self) -> String;
    fn health_check(&mut self) -> Result<(), BackendError>;
    fn driver(&mut self) -> Driver<'_>;
}
