//! Open- and closed-loop load generation.
//!
//! Open-loop trials fix the whole arrival schedule up front from the pattern
//! seed, so arrivals never depend on how fast the server answers. Closed-loop
//! trials keep exactly one request in flight.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Driver, InferenceBackend, PromptRequest, StreamingClient, VirtualServer};
use crate::model::{LoadPattern, RequestRecord, RequestStatus, TrialMode, ValidationError};
use crate::slo::{evaluate_slos, latency_stats, ConstraintOutcome, LatencyStats, SloSpec, StatsError};
use crate::steady_state::{fit_stability, StabilityDiagnostics, DEFAULT_TOLERANCE};

/// Virtual seconds a closed-loop client spends before retrying after an
/// immediate rejection.
const REJECTION_TURNAROUND: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ArrivalProcess {
    #[default]
    Deterministic,
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub mode: TrialMode,
    /// Requests per second; ignored in closed loop.
    pub rate: f64,
    pub pattern: LoadPattern,
    #[serde(default)]
    pub arrival_process: ArrivalProcess,
    /// Per-request timeout in seconds.
    pub timeout: f64,
    #[serde(default)]
    pub slos: SloSpec,
    /// Steady-state slope tolerance.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

pub const DEFAULT_TIMEOUT: f64 = 120.0;

impl TrialPlan {
    pub fn open_loop(rate: f64, pattern: LoadPattern) -> Self {
        Self {
            mode: TrialMode::OpenLoop,
            rate,
            pattern,
            arrival_process: ArrivalProcess::Deterministic,
            timeout: DEFAULT_TIMEOUT,
            slos: SloSpec::default(),
            tolerance: DEFAULT_TOLERANCE,
        }
    }

    pub fn closed_loop(pattern: LoadPattern) -> Self {
        Self {
            mode: TrialMode::ClosedLoop,
            rate: 0.0,
            ..Self::open_loop(0.0, pattern)
        }
    }

    pub fn with_slos(mut self, slos: SloSpec) -> Self {
        self.slos = slos;
        self
    }

    pub fn with_timeout(mut self, timeout: f64) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn with_arrivals(mut self, process: ArrivalProcess) -> Self {
        self.arrival_process = process;
        self
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        self.pattern.validate()?;
        self.slos.validate()?;
        if self.mode == TrialMode::OpenLoop && !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(ValidationError::new("rate", "open-loop trials need a positive rate"));
        }
        if !(self.timeout.is_finite() && self.timeout > 0.0) {
            return Err(ValidationError::new("timeout", "must be positive"));
        }
        Ok(())
    }
}

/// One fixed-rate run with its telemetry and verdicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub rate: f64,
    pub mode: TrialMode,
    pub records: Vec<RequestRecord>,
    pub latency_stats: LatencyStats,
    pub slo_checks: Vec<ConstraintOutcome>,
    /// `None` when the fit could not be computed; see `stability_note`.
    pub stability: Option<StabilityDiagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability_note: Option<String>,
    pub failed_requests: usize,
    pub slo_pass: bool,
    /// Seconds from trial start to the last completion (or end of window).
    pub elapsed: f64,
}

impl TrialResult {
    /// Computes statistics and verdicts for a finished trial.
    ///
    /// Passes iff no request failed, every constraint holds and, for open
    /// loop, the arrival/completion fit is steady.
    pub fn evaluate(
        rate: f64,
        mode: TrialMode,
        mut records: Vec<RequestRecord>,
        slos: &SloSpec,
        tolerance: f64,
        window: f64,
    ) -> Self {
        records.sort_by(|a, b| a.arrival_ts.total_cmp(&b.arrival_ts).then(a.request_id.cmp(&b.request_id)));
        let failed_requests = records.iter().filter(|r| !r.is_ok()).count();
        let slo_checks = evaluate_slos(slos, &records);
        let (stability, stability_note) = match fit_stability(&records, tolerance) {
            Ok(d) => (Some(d), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let steady = match mode {
            TrialMode::ClosedLoop => true,
            TrialMode::OpenLoop => stability.as_ref().is_some_and(|d| d.is_stable),
        };
        let slo_pass = failed_requests == 0 && !records.is_empty() && slo_checks.iter().all(|c| c.pass) && steady;
        let elapsed = records.iter().filter_map(|r| r.completion_ts).fold(window, f64::max);
        Self {
            rate,
            mode,
            latency_stats: latency_stats(&records),
            records,
            slo_checks,
            stability,
            stability_note,
            failed_requests,
            slo_pass,
            elapsed,
        }
    }

    pub fn error_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.status == RequestStatus::Error).count() as f64 / self.records.len() as f64
    }
}

#[derive(Debug, Error)]
pub enum LoadgenError {
    #[error("invalid trial plan: {0}")]
    InvalidPlan(#[from] ValidationError),
    #[error(transparent)]
    BackendUnavailable(#[from] BackendError),
    #[error("trial aborted: {:.0}% of requests errored", .0.error_fraction() * 100.0)]
    TrialAborted(Box<TrialResult>),
}

/// Arrival offsets (seconds) within `[0, duration)`. The first request fires
/// at t = 0.
pub fn arrival_schedule(rate: f64, duration: f64, process: ArrivalProcess, seed: u64) -> Vec<f64> {
    match process {
        ArrivalProcess::Deterministic => (0u64..)
            .map(|i| i as f64 / rate)
            .take_while(|t| *t < duration)
            .collect(),
        ArrivalProcess::Poisson => {
            let gaps = Exp::new(rate).expect("positive rate");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = 0.0;
            let mut out = Vec::new();
            while t < duration {
                out.push(t);
                t += gaps.sample(&mut rng);
            }
            out
        }
    }
}

/// Runs one trial against `backend` and evaluates it.
pub fn run_trial(plan: &TrialPlan, backend: &mut dyn InferenceBackend) -> Result<TrialResult, LoadgenError> {
    plan.validate()?;
    backend.health_check()?;
    let records = match backend.driver() {
        Driver::Virtual(server) => match plan.mode {
            TrialMode::OpenLoop => virtual_open_loop(plan, server),
            TrialMode::ClosedLoop => virtual_closed_loop(plan, server),
        },
        Driver::Live(live) => {
            let client = live.client;
            live.runtime.block_on(async move {
                match plan.mode {
                    TrialMode::OpenLoop => live_open_loop(plan, client).await,
                    TrialMode::ClosedLoop => live_closed_loop(plan, client).await,
                }
            })
        }
    };
    let rate = match plan.mode {
        TrialMode::OpenLoop => plan.rate,
        TrialMode::ClosedLoop => 0.0,
    };
    let result = TrialResult::evaluate(rate, plan.mode, records, &plan.slos, plan.tolerance, plan.pattern.duration);
    if result.error_fraction() > 0.5 {
        return Err(LoadgenError::TrialAborted(Box::new(result)));
    }
    Ok(result)
}

/// Marks completions that exceeded the per-request timeout.
fn enforce_timeout(record: RequestRecord, timeout: f64) -> RequestRecord {
    match record.e2e() {
        Some(latency) if latency > timeout => RequestRecord {
            completion_ts: None,
            status: RequestStatus::Timeout,
            ..record
        },
        _ => record,
    }
}

fn virtual_open_loop(plan: &TrialPlan, server: &mut dyn VirtualServer) -> Vec<RequestRecord> {
    let p = &plan.pattern;
    let schedule = arrival_schedule(plan.rate, p.duration, plan.arrival_process, p.seed);
    server.reset();
    for (id, &t) in schedule.iter().enumerate() {
        server.submit(PromptRequest::from_pattern(p, id as u64), t);
    }
    let deadline = schedule.last().copied().unwrap_or(0.0) + plan.timeout;
    server.run_until(deadline);
    let mut finished: HashMap<u64, RequestRecord> =
        server.take_finished().into_iter().map(|r| (r.request_id, r)).collect();
    schedule
        .iter()
        .enumerate()
        .map(|(id, &t)| match finished.remove(&(id as u64)) {
            Some(r) => enforce_timeout(r, plan.timeout),
            None => RequestRecord::failed(id as u64, t, RequestStatus::Timeout),
        })
        .collect()
}

fn virtual_closed_loop(plan: &TrialPlan, server: &mut dyn VirtualServer) -> Vec<RequestRecord> {
    let p = &plan.pattern;
    server.reset();
    let mut records = Vec::new();
    let mut t = 0.0;
    let mut id = 0u64;
    while t < p.duration {
        server.submit(PromptRequest::from_pattern(p, id), t);
        server.run_until_idle(t + plan.timeout);
        let done = server.take_finished().into_iter().find(|r| r.request_id == id);
        let record = match done {
            Some(r) => enforce_timeout(r, plan.timeout),
            None => RequestRecord::failed(id, t, RequestStatus::Timeout),
        };
        t = match (record.status, record.completion_ts) {
            (RequestStatus::Ok, Some(c)) => c,
            (RequestStatus::Timeout, _) => t + plan.timeout,
            _ => t + REJECTION_TURNAROUND,
        };
        records.push(record);
        id += 1;
    }
    records
}

async fn live_open_loop(plan: &TrialPlan, client: Arc<dyn StreamingClient>) -> Vec<RequestRecord> {
    let p = &plan.pattern;
    let schedule = arrival_schedule(plan.rate, p.duration, plan.arrival_process, p.seed);
    let timeout = Duration::from_secs_f64(plan.timeout);
    let start = Instant::now();
    let mut tasks = tokio::task::JoinSet::new();
    for (id, &t) in schedule.iter().enumerate() {
        tokio::time::sleep_until((start + Duration::from_secs_f64(t)).into()).await;
        let client = Arc::clone(&client);
        let request = PromptRequest::from_pattern(p, id as u64);
        tasks.spawn(async move { client.send(request, start, timeout).await });
    }
    let mut records = Vec::with_capacity(schedule.len());
    while let Some(joined) = tasks.join_next().await {
        match joined {
            Ok(r) => records.push(r),
            Err(e) => log::warn!("request task failed: {e}"),
        }
    }
    records
}

async fn live_closed_loop(plan: &TrialPlan, client: Arc<dyn StreamingClient>) -> Vec<RequestRecord> {
    let p = &plan.pattern;
    let timeout = Duration::from_secs_f64(plan.timeout);
    let window = Duration::from_secs_f64(p.duration);
    let start = Instant::now();
    let mut records = Vec::new();
    let mut id = 0;
    while start.elapsed() < window {
        records.push(client.send(PromptRequest::from_pattern(p, id), start, timeout).await);
        id += 1;
    }
    records
}

/// `1 / mean(E2E latency)` over OK records of a closed-loop trial.
pub fn closed_loop_lower_bound(result: &TrialResult) -> Result<f64, StatsError> {
    let latencies: Vec<f64> = result.records.iter().filter_map(RequestRecord::e2e).collect();
    if latencies.is_empty() {
        return Err(StatsError::EmptyTelemetry("e2e_latency".into()));
    }
    let mean = latencies.iter().sum::<f64>() / latencies.len() as f64;
    Ok(1.0 / mean)
}
