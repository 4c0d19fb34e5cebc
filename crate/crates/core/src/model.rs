//! Shared domain vocabulary: workload shapes, runtime configurations and
//! per-request telemetry.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Raised when a value violates the invariants of its domain type.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid {field}: {reason}")]
pub struct ValidationError {
    pub field: String,
    pub reason: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Shape of the synthetic workload driven against a server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadPattern {
    /// Prompt tokens per request.
    pub input_len: u32,
    /// Generated tokens per request.
    pub output_len: u32,
    /// Leading prompt tokens shared by every request.
    #[serde(default)]
    pub prefix_len: u32,
    /// Seconds of request submission per trial.
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_duration() -> f64 {
    60.0
}

impl LoadPattern {
    pub fn new(input_len: u32, output_len: u32) -> Self {
        Self {
            input_len,
            output_len,
            prefix_len: 0,
            duration: default_duration(),
            seed: 0,
        }
    }

    pub fn with_prefix(mut self, prefix_len: u32) -> Self {
        self.prefix_len = prefix_len;
        self
    }

    pub fn with_duration(mut self, duration: f64) -> Self {
        self.duration = duration;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.input_len < 1 {
            return Err(ValidationError::new("input_len", "must be at least 1"));
        }
        if self.output_len < 1 {
            return Err(ValidationError::new("output_len", "must be at least 1"));
        }
        if self.prefix_len > self.input_len {
            return Err(ValidationError::new(
                "prefix_len",
                format!("{} exceeds input_len {}", self.prefix_len, self.input_len),
            ));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(ValidationError::new("duration", "must be a positive number of seconds"));
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> u64 {
        u64::from(self.input_len) + u64::from(self.output_len)
    }
}

/// Context window sized for the pattern with a 15% buffer for
/// variable-length sequences: `ceil((input_len + output_len) * 1.15)`.
///
/// Computed in integer arithmetic so that exact multiples do not round up.
pub fn compute_max_context(pattern: &LoadPattern) -> u32 {
    let total = pattern.total_tokens();
    let buffered = (total * 115).div_ceil(100);
    u32::try_from(buffered).unwrap_or(u32::MAX)
}

pub const TENSOR_PARALLEL_CHOICES: [u32; 4] = [1, 2, 4, 8];

/// One candidate serving configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub tensor_parallel: u32,
    /// Independent replicas; per-GPU normalization divides by `tensor_parallel * data_parallel`.
    #[serde(default = "one")]
    pub data_parallel: u32,
    pub max_num_seqs: u32,
    pub max_batched_tokens: u32,
    pub max_context: u32,
}

fn one() -> u32 {
    1
}

impl RuntimeConfig {
    /// A middle-of-the-road configuration for `pattern` on a single GPU.
    pub fn default_for(pattern: &LoadPattern) -> Self {
        Self {
            tensor_parallel: 1,
            data_parallel: 1,
            max_num_seqs: 256,
            max_batched_tokens: 8192.max(pattern.input_len),
            max_context: compute_max_context(pattern),
        }
    }

    pub fn gpus(&self) -> u32 {
        self.tensor_parallel * self.data_parallel
    }

    pub fn validate(&self, pattern: &LoadPattern) -> Result<(), ValidationError> {
        if !TENSOR_PARALLEL_CHOICES.contains(&self.tensor_parallel) {
            return Err(ValidationError::new(
                "tensor_parallel",
                format!("{} not in {{1, 2, 4, 8}}", self.tensor_parallel),
            ));
        }
        if self.data_parallel < 1 {
            return Err(ValidationError::new("data_parallel", "must be at least 1"));
        }
        if self.max_num_seqs < 1 {
            return Err(ValidationError::new("max_num_seqs", "must be at least 1"));
        }
        if self.max_batched_tokens < pattern.input_len.max(1) {
            return Err(ValidationError::new(
                "max_batched_tokens",
                format!("{} below input_len {}", self.max_batched_tokens, pattern.input_len),
            ));
        }
        if u64::from(self.max_context) < pattern.total_tokens() {
            return Err(ValidationError::new(
                "max_context",
                format!("{} below input_len + output_len", self.max_context),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RequestStatus {
    Ok,
    Error,
    Timeout,
}

/// Telemetry for one request. Timestamps are seconds since trial start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: u64,
    pub arrival_ts: f64,
    pub first_token_ts: Option<f64>,
    pub completion_ts: Option<f64>,
    pub output_tokens: u32,
    pub status: RequestStatus,
}

impl RequestRecord {
    pub fn ok(request_id: u64, arrival: f64, first_token: f64, completion: f64, output_tokens: u32) -> Self {
        Self {
            request_id,
            arrival_ts: arrival,
            first_token_ts: Some(first_token),
            completion_ts: Some(completion),
            output_tokens,
            status: RequestStatus::Ok,
        }
    }

    pub fn failed(request_id: u64, arrival: f64, status: RequestStatus) -> Self {
        Self {
            request_id,
            arrival_ts: arrival,
            first_token_ts: None,
            completion_ts: None,
            output_tokens: 0,
            status,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == RequestStatus::Ok
    }

    /// End-to-end latency in seconds, for completed requests.
    pub fn e2e(&self) -> Option<f64> {
        self.completed().map(|(_, _, c)| c - self.arrival_ts)
    }

    pub fn ttft(&self) -> Option<f64> {
        self.completed().map(|(_, f, _)| f - self.arrival_ts)
    }

    /// Mean inter-token interval after the first token; undefined for
    /// single-token outputs.
    pub fn tpot(&self) -> Option<f64> {
        let (n, f, c) = self.completed()?;
        if n < 2 {
            return None;
        }
        Some((c - f) / f64::from(n - 1))
    }

    fn completed(&self) -> Option<(u32, f64, f64)> {
        match (self.status, self.first_token_ts, self.completion_ts) {
            (RequestStatus::Ok, Some(f), Some(c)) => Some((self.output_tokens, f, c)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrialMode {
    OpenLoop,
    ClosedLoop,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_context_examples() {
        assert_eq!(compute_max_context(&LoadPattern::new(1200, 80)), 1472);
        assert_eq!(compute_max_context(&LoadPattern::new(1500, 1500)), 3450);
        assert_eq!(compute_max_context(&LoadPattern::new(1, 1)), 3);
    }

    #[test]
    fn max_context_matches_float_formula_off_exact_multiples() {
        for total in [7u32, 13, 999, 1001, 4097] {
            let p = LoadPattern::new(total - 1, 1);
            let expected = (f64::from(total) * 1.15).ceil() as u32;
            assert_eq!(compute_max_context(&p), expected, "total {total}");
        }
    }

    #[test]
    fn pattern_validation() {
        assert!(LoadPattern::new(10, 10).validate().is_ok());
        assert!(LoadPattern::new(0, 10).validate().is_err());
        assert!(LoadPattern::new(10, 0).validate().is_err());
        assert!(LoadPattern::new(10, 1).with_prefix(11).validate().is_err());
        assert!(LoadPattern::new(10, 1).with_duration(0.0).validate().is_err());
    }

    #[test]
    fn runtime_config_validation() {
        let p = LoadPattern::new(1200, 80);
        let mut c = RuntimeConfig::default_for(&p);
        assert!(c.validate(&p).is_ok());
        c.tensor_parallel = 3;
        assert_eq!(c.validate(&p).unwrap_err().field, "tensor_parallel");
        c.tensor_parallel = 2;
        c.max_batched_tokens = 1000;
        assert_eq!(c.validate(&p).unwrap_err().field, "max_batched_tokens");
        c.max_batched_tokens = 2048;
        c.max_context = 1279;
        assert_eq!(c.validate(&p).unwrap_err().field, "max_context");
    }

    #[test]
    fn derived_latencies() {
        let r = RequestRecord::ok(0, 0.0, 0.05, 0.45, 5);
        assert!((r.ttft().unwrap() - 0.05).abs() < 1e-12);
        assert!((r.e2e().unwrap() - 0.45).abs() < 1e-12);
        assert!((r.tpot().unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(RequestRecord::ok(1, 0.0, 0.1, 0.1, 1).tpot(), None);
        assert_eq!(RequestRecord::failed(2, 0.0, RequestStatus::Error).e2e(), None);
    }
}
