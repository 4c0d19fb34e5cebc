//! Discrete-event, virtual-clock simulator of a continuous-batching server.
//!
//! Each replica runs scheduler steps back to back while it has work. At the
//! start of a step it admits queued requests while the running set is below
//! `min(max_num_seqs, max_batched_tokens)`; every decoding sequence emits one
//! token, and whatever is left of the token budget goes to prefill chunks in
//! FCFS order. A sequence emits its first token at the end of the step that
//! completes its prefill. Step duration is
//!
//! ```text
//! decode_step_base + (decode_tokens * decode_token_cost + prefill_tokens / prefill_rate) / tp^e
//! ```
//!
//! With `data_parallel > 1` requests are dealt round-robin to independent
//! replicas.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, Driver, InferenceBackend, PromptRequest, VirtualServer};
use crate::model::{LoadPattern, RequestRecord, RequestStatus, RuntimeConfig, ValidationError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimServerModel {
    pub config: RuntimeConfig,
    /// Prefill tokens per second on one GPU.
    #[serde(default = "defaults::prefill_rate")]
    pub prefill_rate: f64,
    /// Tensor-parallel efficiency exponent `e`; speedup is `tp^e`.
    #[serde(default = "defaults::tp_efficiency")]
    pub tp_efficiency: f64,
    /// Fixed seconds per scheduler step.
    #[serde(default = "defaults::decode_step_base")]
    pub decode_step_base: f64,
    /// Seconds per decoded token per step on one GPU.
    #[serde(default = "defaults::decode_token_cost")]
    pub decode_token_cost: f64,
    #[serde(default)]
    pub prefix_cache: bool,
}

mod defaults {
    pub fn prefill_rate() -> f64 {
        40_000.0
    }
    pub fn tp_efficiency() -> f64 {
        0.85
    }
    pub fn decode_step_base() -> f64 {
        0.004
    }
    pub fn decode_token_cost() -> f64 {
        0.000_08
    }
}

/// Speed parameters of a simulated model and GPU, without a runtime config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimProfile {
    #[serde(default = "defaults::prefill_rate")]
    pub prefill_rate: f64,
    #[serde(default = "defaults::tp_efficiency")]
    pub tp_efficiency: f64,
    #[serde(default = "defaults::decode_step_base")]
    pub decode_step_base: f64,
    #[serde(default = "defaults::decode_token_cost")]
    pub decode_token_cost: f64,
    #[serde(default)]
    pub prefix_cache: bool,
}

impl Default for SimProfile {
    fn default() -> Self {
        Self {
            prefill_rate: defaults::prefill_rate(),
            tp_efficiency: defaults::tp_efficiency(),
            decode_step_base: defaults::decode_step_base(),
            decode_token_cost: defaults::decode_token_cost(),
            prefix_cache: false,
        }
    }
}

impl SimProfile {
    pub fn model(&self, config: RuntimeConfig) -> SimServerModel {
        SimServerModel {
            config,
            prefill_rate: self.prefill_rate,
            tp_efficiency: self.tp_efficiency,
            decode_step_base: self.decode_step_base,
            decode_token_cost: self.decode_token_cost,
            prefix_cache: self.prefix_cache,
        }
    }

    /// Same model with per-token work divided by `speedup`.
    pub fn accelerated(&self, speedup: f64) -> Self {
        Self {
            prefill_rate: self.prefill_rate * speedup,
            decode_token_cost: self.decode_token_cost / speedup,
            ..self.clone()
        }
    }
}

impl SimServerModel {
    pub fn new(config: RuntimeConfig) -> Self {
        SimProfile::default().model(config)
    }

    pub fn with_config(&self, config: RuntimeConfig) -> Self {
        Self { config, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let positive = [
            ("prefill_rate", self.prefill_rate),
            ("decode_step_base", self.decode_step_base),
            ("decode_token_cost", self.decode_token_cost),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ValidationError::new(field, "must be positive"));
            }
        }
        if !(self.tp_efficiency > 0.0 && self.tp_efficiency <= 1.0) {
            return Err(ValidationError::new("tp_efficiency", "must lie in (0, 1]"));
        }
        let c = &self.config;
        if c.max_num_seqs < 1 || c.max_batched_tokens < 1 || c.tensor_parallel < 1 || c.data_parallel < 1 {
            return Err(ValidationError::new("config", "sizes must be at least 1"));
        }
        Ok(())
    }

    fn tp_speedup(&self) -> f64 {
        f64::from(self.config.tensor_parallel).powf(self.tp_efficiency)
    }

    /// Largest running set a replica will hold.
    pub fn batch_limit(&self) -> u32 {
        self.config.max_num_seqs.min(self.config.max_batched_tokens)
    }

    pub fn step_duration(&self, decode_tokens: u64, prefill_tokens: u64) -> f64 {
        self.decode_step_base
            + (decode_tokens as f64 * self.decode_token_cost + prefill_tokens as f64 / self.prefill_rate)
                / self.tp_speedup()
    }

    fn prefill_tokens(&self, pattern: &LoadPattern, cached: bool) -> u64 {
        let p = if cached && self.prefix_cache {
            pattern.input_len - pattern.prefix_len
        } else {
            pattern.input_len
        };
        u64::from(p.max(1))
    }

    /// End-to-end latency of a request served alone: one prefill step then
    /// `output_len - 1` single-token decode steps.
    pub fn unloaded_latency(&self, pattern: &LoadPattern) -> f64 {
        let prefill = self.step_duration(0, self.prefill_tokens(pattern, false));
        prefill + f64::from(pattern.output_len - 1) * self.step_duration(1, 0)
    }

    /// Closed-form saturation throughput (requests/second) with the running
    /// set full. The slot bound assumes each request holds a slot for one
    /// prefill step plus `output_len - 1` decode steps; the token bound
    /// applies when prefill chunks cannot fit beside the decodes. Prefix
    /// caching is taken as warm.
    pub fn analytic_capacity(&self, pattern: &LoadPattern) -> f64 {
        let b = f64::from(self.batch_limit());
        let out = f64::from(pattern.output_len);
        let p = self.prefill_tokens(pattern, true) as f64;
        let s = self.tp_speedup();
        let per_request = out * self.decode_step_base / b
            + ((out - 1.0) * self.decode_token_cost + p / self.prefill_rate) / s;
        let slot_bound = 1.0 / per_request;

        let m = f64::from(self.config.max_batched_tokens);
        let tokens_per_request = p + out - 1.0;
        let decode_share = (out - 1.0) / tokens_per_request;
        let full_step = self.decode_step_base
            + (m * decode_share * self.decode_token_cost + m * (1.0 - decode_share) / self.prefill_rate) / s;
        let token_bound = m / (tokens_per_request * full_step);

        slot_bound.min(token_bound) * f64::from(self.config.data_parallel)
    }
}

/// Something that happened inside the simulator; emitted when tracing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SimEvent {
    Arrival { t: f64, id: u64, replica: usize },
    Rejected { t: f64, id: u64, reason: String },
    Admitted { t: f64, id: u64, prefill_tokens: u64 },
    Step { t: f64, replica: usize, duration: f64, decode_tokens: u64, prefill_tokens: u64, running: usize },
    FirstToken { t: f64, id: u64 },
    Completed { t: f64, id: u64 },
}

#[derive(Debug, Clone)]
struct Prefill {
    request: PromptRequest,
    arrival: f64,
    remaining: u64,
}

#[derive(Debug, Clone)]
struct Decoding {
    finish_step: u64,
    request: PromptRequest,
    arrival: f64,
    first_token: f64,
}

impl PartialEq for Decoding {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Decoding {}
impl PartialOrd for Decoding {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Decoding {
    // min-heap on (finish_step, id)
    fn cmp(&self, other: &Self) -> Ordering {
        (other.finish_step, other.request.id).cmp(&(self.finish_step, self.request.id))
    }
}

#[derive(Debug)]
struct Replica {
    index: usize,
    clock: f64,
    step: u64,
    pending: VecDeque<(f64, PromptRequest)>,
    waiting: VecDeque<(f64, PromptRequest)>,
    prefilling: VecDeque<Prefill>,
    decoding: BinaryHeap<Decoding>,
    seen_prefixes: HashSet<u64>,
}

impl Replica {
    fn new(index: usize) -> Self {
        Self {
            index,
            clock: 0.0,
            step: 0,
            pending: VecDeque::new(),
            waiting: VecDeque::new(),
            prefilling: VecDeque::new(),
            decoding: BinaryHeap::new(),
            seen_prefixes: HashSet::new(),
        }
    }

    fn running(&self) -> usize {
        self.prefilling.len() + self.decoding.len()
    }

    fn busy(&self) -> bool {
        self.running() > 0 || !self.waiting.is_empty()
    }

    fn idle(&self) -> bool {
        !self.busy() && self.pending.is_empty()
    }

    fn absorb_arrivals(&mut self, model: &SimServerModel, out: &mut Sink) {
        while let Some((arrival, _)) = self.pending.front() {
            if *arrival > self.clock {
                break;
            }
            let (arrival, request) = self.pending.pop_front().expect("front checked");
            out.trace(|| SimEvent::Arrival { t: arrival, id: request.id, replica: self.index });
            let needed = u64::from(request.input_len) + u64::from(request.output_len);
            if needed > u64::from(model.config.max_context) {
                out.trace(|| SimEvent::Rejected {
                    t: arrival,
                    id: request.id,
                    reason: format!("context overflow: {needed} > {}", model.config.max_context),
                });
                out.finished.push(RequestRecord::failed(request.id, arrival, RequestStatus::Error));
            } else {
                self.waiting.push_back((arrival, request));
            }
        }
    }

    /// Runs one scheduler step starting at the current clock.
    fn step(&mut self, model: &SimServerModel, out: &mut Sink) {
        let limit = model.batch_limit() as usize;
        while self.running() < limit {
            let Some((arrival, request)) = self.waiting.pop_front() else { break };
            let cached = request.prefix_key().is_some_and(|k| self.seen_prefixes.contains(&k));
            let pattern = LoadPattern {
                input_len: request.input_len,
                output_len: request.output_len,
                prefix_len: request.prefix_len,
                duration: 1.0,
                seed: request.seed,
            };
            let remaining = model.prefill_tokens(&pattern, cached);
            out.trace(|| SimEvent::Admitted { t: self.clock, id: request.id, prefill_tokens: remaining });
            self.prefilling.push_back(Prefill { request, arrival, remaining });
        }

        let decode_tokens = self.decoding.len() as u64;
        let mut budget = u64::from(model.config.max_batched_tokens).saturating_sub(decode_tokens);
        let mut prefill_tokens = 0;
        for p in self.prefilling.iter_mut() {
            if budget == 0 {
                break;
            }
            let chunk = p.remaining.min(budget);
            p.remaining -= chunk;
            budget -= chunk;
            prefill_tokens += chunk;
        }

        let duration = model.step_duration(decode_tokens, prefill_tokens);
        self.step += 1;
        let end = self.clock + duration;
        out.trace(|| SimEvent::Step {
            t: self.clock,
            replica: self.index,
            duration,
            decode_tokens,
            prefill_tokens,
            running: self.running(),
        });

        while self.decoding.peek().is_some_and(|d| d.finish_step <= self.step) {
            let d = self.decoding.pop().expect("peeked");
            out.trace(|| SimEvent::Completed { t: end, id: d.request.id });
            out.finished.push(RequestRecord::ok(d.request.id, d.arrival, d.first_token, end, d.request.output_len));
        }

        while self.prefilling.front().is_some_and(|p| p.remaining == 0) {
            let p = self.prefilling.pop_front().expect("front checked");
            if let Some(k) = p.request.prefix_key() {
                self.seen_prefixes.insert(k);
            }
            out.trace(|| SimEvent::FirstToken { t: end, id: p.request.id });
            if p.request.output_len <= 1 {
                out.trace(|| SimEvent::Completed { t: end, id: p.request.id });
                out.finished.push(RequestRecord::ok(p.request.id, p.arrival, end, end, 1));
            } else {
                self.decoding.push(Decoding {
                    finish_step: self.step + u64::from(p.request.output_len - 1),
                    request: p.request,
                    arrival: p.arrival,
                    first_token: end,
                });
            }
        }
        self.clock = end;
    }

    fn run_until(&mut self, model: &SimServerModel, until: f64, out: &mut Sink) {
        loop {
            self.absorb_arrivals(model, out);
            if self.busy() {
                if self.clock > until {
                    break;
                }
                self.step(model, out);
            } else if let Some((arrival, _)) = self.pending.front() {
                if *arrival > until {
                    self.clock = self.clock.max(until);
                    break;
                }
                self.clock = self.clock.max(*arrival);
            } else {
                self.clock = self.clock.max(until);
                break;
            }
        }
    }

    fn run_until_idle(&mut self, model: &SimServerModel, limit: f64, out: &mut Sink) {
        loop {
            self.absorb_arrivals(model, out);
            if self.busy() {
                if self.clock > limit {
                    break;
                }
                self.step(model, out);
            } else if let Some((arrival, _)) = self.pending.front() {
                if *arrival > limit {
                    break;
                }
                self.clock = self.clock.max(*arrival);
            } else {
                break;
            }
        }
    }
}

#[derive(Debug, Default)]
struct Sink {
    finished: Vec<RequestRecord>,
    events: Option<Vec<SimEvent>>,
}

impl Sink {
    fn trace(&mut self, event: impl FnOnce() -> SimEvent) {
        if let Some(events) = self.events.as_mut() {
            events.push(event());
        }
    }
}

/// The simulated server: one [`Replica`] per data-parallel rank.
#[derive(Debug)]
pub struct SimServer {
    model: SimServerModel,
    replicas: Vec<Replica>,
    submitted: u64,
    sink: Sink,
}

impl SimServer {
    pub fn new(model: SimServerModel) -> Result<Self, ValidationError> {
        model.validate()?;
        let replicas = (0..model.config.data_parallel as usize).map(Replica::new).collect();
        Ok(Self {
            model,
            replicas,
            submitted: 0,
            sink: Sink::default(),
        })
    }

    pub fn model(&self) -> &SimServerModel {
        &self.model
    }

    pub fn enable_trace(&mut self) {
        self.sink.events.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<SimEvent> {
        self.sink.events.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn is_idle(&self) -> bool {
        self.replicas.iter().all(Replica::idle)
    }
}

impl VirtualServer for SimServer {
    fn reset(&mut self) {
        let tracing = self.sink.events.is_some();
        for (i, r) in self.replicas.iter_mut().enumerate() {
            *r = Replica::new(i);
        }
        self.submitted = 0;
        self.sink = Sink::default();
        if tracing {
            self.enable_trace();
        }
    }

    fn submit(&mut self, request: PromptRequest, arrival: f64) {
        let n = self.replicas.len() as u64;
        let replica = &mut self.replicas[(self.submitted % n) as usize];
        self.submitted += 1;
        debug_assert!(replica.pending.back().is_none_or(|(t, _)| *t <= arrival));
        replica.pending.push_back((arrival, request));
    }

    fn run_until(&mut self, until: f64) {
        for r in &mut self.replicas {
            r.run_until(&self.model, until, &mut self.sink);
        }
    }

    fn run_until_idle(&mut self, limit: f64) {
        for r in &mut self.replicas {
            r.run_until_idle(&self.model, limit, &mut self.sink);
        }
    }

    fn take_finished(&mut self) -> Vec<RequestRecord> {
        std::mem::take(&mut self.sink.finished)
    }

    fn now(&self) -> f64 {
        self.replicas.iter().map(|r| r.clock).fold(0.0, f64::max)
    }
}

/// [`InferenceBackend`] wrapper around a [`SimServer`].
#[derive(Debug)]
pub struct SimBackend {
    server: SimServer,
}

impl SimBackend {
    pub fn new(model: SimServerModel) -> Result<Self, BackendError> {
        SimServer::new(model)
            .map(|server| Self { server })
            .map_err(|e| BackendError::Construction(e.to_string()))
    }

    pub fn server_mut(&mut self) -> &mut SimServer {
        &mut self.server
    }
}

impl InferenceBackend for SimBackend {
    fn describe(&self) -> String {
        let c = &self.server.model.config;
        format!(
            "sim(tp={}, dp={}, max_num_seqs={}, max_batched_tokens={})",
            c.tensor_parallel, c.data_parallel, c.max_num_seqs, c.max_batched_tokens
        )
    }

    fn health_check(&mut self) -> Result<(), BackendError> {
        Ok(())
    }

    fn driver(&mut self) -> Driver<'_> {
        Driver::Virtual(&mut self.server)
    }
}

/// Completion rate measured by dumping `n_requests` on the server at once and
/// timing the middle 80% of completions.
pub fn measure_overload_capacity(model: &SimServerModel, pattern: &LoadPattern, n_requests: u64) -> f64 {
    let mut server = SimServer::new(model.clone()).expect("valid model");
    for id in 0..n_requests {
        server.submit(PromptRequest::from_pattern(pattern, id), 0.0);
    }
    server.run_until_idle(f64::INFINITY);
    let mut done: Vec<f64> = server
        .take_finished()
        .into_iter()
        .filter_map(|r| r.completion_ts)
        .collect();
    done.sort_by(f64::total_cmp);
    let lo = done.len() / 10;
    let hi = done.len() - 1 - done.len() / 10;
    (hi - lo) as f64 / (done[hi] - done[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::compute_max_context;

    fn model(pattern: &LoadPattern, seqs: u32, tokens: u32, tp: u32) -> SimServerModel {
        SimServerModel::new(RuntimeConfig {
            tensor_parallel: tp,
            data_parallel: 1,
            max_num_seqs: seqs,
            max_batched_tokens: tokens,
            max_context: compute_max_context(pattern),
        })
    }

    fn serve_alone(m: &SimServerModel, pattern: &LoadPattern) -> RequestRecord {
        let mut s = SimServer::new(m.clone()).unwrap();
        s.submit(PromptRequest::from_pattern(pattern, 0), 0.0);
        s.run_until_idle(f64::INFINITY);
        let mut out = s.take_finished();
        assert_eq!(out.len(), 1);
        out.pop().unwrap()
    }

    #[test]
    fn single_request_closed_form() {
        let pattern = LoadPattern::new(1200, 80);
        let m = model(&pattern, 256, 8192, 1);
        // direct evaluation: prefill step, then 79 decode steps of one token
        let prefill = 0.004 + 1200.0 / 40_000.0;
        let decode = 0.004 + 0.000_08;
        let expected = prefill + 79.0 * decode;
        let r = serve_alone(&m, &pattern);
        assert!((r.e2e().unwrap() - expected).abs() < 1e-9);
        assert!((r.ttft().unwrap() - prefill).abs() < 1e-12);
        assert!((m.unloaded_latency(&pattern) - expected).abs() < 1e-9);
    }

    #[test]
    fn tensor_parallel_speeds_up_token_work() {
        let pattern = LoadPattern::new(1000, 2);
        let m = model(&pattern, 8, 4096, 4);
        let speedup = 4f64.powf(0.85);
        let expected = (0.004 + 1000.0 / 40_000.0 / speedup) + (0.004 + 0.000_08 / speedup);
        assert!((serve_alone(&m, &pattern).e2e().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn context_overflow_rejected() {
        let pattern = LoadPattern::new(100, 20);
        let mut m = model(&pattern, 4, 512, 1);
        m.config.max_context = 110;
        let r = serve_alone(&m, &pattern);
        assert_eq!(r.status, RequestStatus::Error);
    }

    #[test]
    fn single_slot_capacity_is_inverse_latency() {
        let pattern = LoadPattern::new(256, 32);
        let m = model(&pattern, 1, 4096, 1);
        let e2e = m.unloaded_latency(&pattern);
        assert!((m.analytic_capacity(&pattern) - 1.0 / e2e).abs() < 1e-9);
        let measured = measure_overload_capacity(&m, &pattern, 500);
        assert!((measured - 1.0 / e2e).abs() / (1.0 / e2e) < 1e-6, "{measured} vs {}", 1.0 / e2e);
    }

    #[test]
    fn analytic_capacity_matches_overload_simulation() {
        let pattern = LoadPattern::new(1200, 80);
        for (seqs, tokens, tp) in [(256, 8192, 1), (64, 8192, 2), (32, 16384, 8), (128, 4096, 1), (16, 2048, 4)] {
            let m = model(&pattern, seqs, tokens, tp);
            let analytic = m.analytic_capacity(&pattern);
            let measured = measure_overload_capacity(&m, &pattern, 10_000);
            let err = (analytic - measured).abs() / measured;
            assert!(err < 0.05, "seqs={seqs} tokens={tokens} tp={tp}: analytic {analytic} measured {measured}");
        }
    }

    #[test]
    fn doubling_tp_near_doubles_decode_bound_capacity() {
        let pattern = LoadPattern::new(16, 512);
        let mut m1 = model(&pattern, 1024, 4096, 1);
        m1.tp_efficiency = 1.0;
        let mut m2 = model(&pattern, 1024, 4096, 2);
        m2.tp_efficiency = 1.0;
        let c1 = measure_overload_capacity(&m1, &pattern, 2_000);
        let c2 = measure_overload_capacity(&m2, &pattern, 2_000);
        let ratio = c2 / c1;
        assert!(ratio > 1.6 && ratio <= 2.0, "ratio {ratio}");
    }

    #[test]
    fn capacity_monotone_in_config() {
        let pattern = LoadPattern::new(512, 64);
        let base = model(&pattern, 32, 4096, 1);
        let c = |m: &SimServerModel| measure_overload_capacity(m, &pattern, 3_000);
        let c0 = c(&base);
        let mut more_seqs = base.clone();
        more_seqs.config.max_num_seqs = 64;
        let mut more_tokens = base.clone();
        more_tokens.config.max_batched_tokens = 8192;
        let mut more_tp = base.clone();
        more_tp.config.tensor_parallel = 2;
        assert!(c(&more_seqs) >= c0);
        assert!(c(&more_tokens) >= c0 * (1.0 - 1e-9));
        assert!(c(&more_tp) > c0);
    }

    #[test]
    fn prefix_cache_shortens_later_prefills() {
        let pattern = LoadPattern::new(1000, 2).with_prefix(900);
        let mut m = model(&pattern, 4, 4096, 1);
        m.prefix_cache = true;
        let mut s = SimServer::new(m).unwrap();
        s.submit(PromptRequest::from_pattern(&pattern, 0), 0.0);
        s.submit(PromptRequest::from_pattern(&pattern, 1), 10.0);
        s.run_until_idle(f64::INFINITY);
        let out = s.take_finished();
        assert!(out[1].ttft().unwrap() < out[0].ttft().unwrap());
        assert!((out[1].ttft().unwrap() - (0.004 + 100.0 / 40_000.0)).abs() < 1e-12);
    }

    #[test]
    fn data_parallel_replicas_multiply_capacity() {
        let pattern = LoadPattern::new(256, 32);
        let m1 = model(&pattern, 16, 4096, 1);
        let mut m2 = m1.clone();
        m2.config.data_parallel = 2;
        let c1 = measure_overload_capacity(&m1, &pattern, 2_000);
        let c2 = measure_overload_capacity(&m2, &pattern, 2_000);
        assert!((c2 / c1 - 2.0).abs() < 0.05);
        assert!((m2.analytic_capacity(&pattern) / m1.analytic_capacity(&pattern) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn trace_is_deterministic_and_work_conserving() {
        let pattern = LoadPattern::new(128, 8);
        let m = model(&pattern, 4, 1024, 1);
        let run = || {
            let mut s = SimServer::new(m.clone()).unwrap();
            s.enable_trace();
            for id in 0..40 {
                s.submit(PromptRequest::from_pattern(&pattern, id), id as f64 * 0.01);
            }
            s.run_until_idle(f64::INFINITY);
            s.take_trace()
        };
        let a = run();
        assert_eq!(a, run());
        // Any gap between steps ends exactly when new work arrives.
        let arrivals: Vec<f64> = (0..40).map(|id| id as f64 * 0.01).collect();
        let steps: Vec<(f64, f64)> = a
            .iter()
            .filter_map(|e| match e {
                SimEvent::Step { t, duration, .. } => Some((*t, *duration)),
                _ => None,
            })
            .collect();
        for w in steps.windows(2) {
            let (t0, d0) = w[0];
            let (t1, _) = w[1];
            assert!(t1 >= t0 + d0 - 1e-12);
            if t1 > t0 + d0 + 1e-12 {
                assert!(arrivals.iter().any(|x| (x - t1).abs() < 1e-12), "idle gap ending at {t1}");
            }
        }
    }
}
