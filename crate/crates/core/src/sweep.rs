//! Adaptive rate sweep for the maximum sustainable SLO-compliant rate.
//!
//! With SLOs, a closed-loop probe runs first: if it already violates them the
//! sweep stops as infeasible, otherwise `1 / mean latency` becomes the lower
//! bound. Open-loop trials then start at `initial_rate`. A passing rate is
//! doubled until the first failure; after that the search bisects between the
//! best passing rate and the lowest failing one. A failure before any pass
//! halves towards the lower bound. The sweep stops once the next rate is
//! within the threshold of the best rate, or the trial budget runs out.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, InferenceBackend};
use crate::loadgen::{closed_loop_lower_bound, run_trial, ArrivalProcess, LoadgenError, TrialPlan, TrialResult, DEFAULT_TIMEOUT};
use crate::model::{LoadPattern, TrialMode, ValidationError};
use crate::slo::SloSpec;
use crate::steady_state::DEFAULT_TOLERANCE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    /// Fraction of the current best rate.
    Relative(f64),
    /// Requests per second.
    Absolute(f64),
}

impl Threshold {
    pub fn resolve(&self, reference: f64) -> f64 {
        match *self {
            Threshold::Relative(f) => f * reference.abs(),
            Threshold::Absolute(a) => a,
        }
    }

    fn value(&self) -> f64 {
        match *self {
            Threshold::Relative(v) | Threshold::Absolute(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(default = "defaults::initial_rate")]
    pub initial_rate: f64,
    /// Maximum number of open-loop trials.
    #[serde(default = "defaults::budget")]
    pub budget: usize,
    #[serde(default = "defaults::threshold")]
    pub threshold: Threshold,
    #[serde(default)]
    pub slos: SloSpec,
    #[serde(default = "defaults::tolerance")]
    pub tolerance: f64,
    #[serde(default = "defaults::timeout")]
    pub timeout: f64,
    #[serde(default)]
    pub arrival_process: ArrivalProcess,
}

mod defaults {
    use super::*;
    pub fn initial_rate() -> f64 {
        1.0
    }
    pub fn budget() -> usize {
        12
    }
    pub fn threshold() -> Threshold {
        Threshold::Relative(0.05)
    }
    pub fn tolerance() -> f64 {
        DEFAULT_TOLERANCE
    }
    pub fn timeout() -> f64 {
        DEFAULT_TIMEOUT
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            initial_rate: defaults::initial_rate(),
            budget: defaults::budget(),
            threshold: defaults::threshold(),
            slos: SloSpec::default(),
            tolerance: defaults::tolerance(),
            timeout: defaults::timeout(),
            arrival_process: ArrivalProcess::default(),
        }
    }
}

impl SweepConfig {
    pub fn with_slos(mut self, slos: SloSpec) -> Self {
        self.slos = slos;
        self
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if !(self.initial_rate.is_finite() && self.initial_rate > 0.0) {
            return Err(ValidationError::new("initial_rate", "must be positive"));
        }
        if self.budget < 1 {
            return Err(ValidationError::new("budget", "must be at least 1"));
        }
        if !(self.threshold.value().is_finite() && self.threshold.value() > 0.0) {
            return Err(ValidationError::new("threshold", "must be positive"));
        }
        self.slos.validate()
    }

    fn plan(&self, mode: TrialMode, rate: f64, pattern: &LoadPattern) -> TrialPlan {
        let plan = match mode {
            TrialMode::OpenLoop => TrialPlan::open_loop(rate, pattern.clone()),
            TrialMode::ClosedLoop => TrialPlan::closed_loop(pattern.clone()),
        };
        plan.with_slos(self.slos.clone())
            .with_tolerance(self.tolerance)
            .with_timeout(self.timeout)
            .with_arrivals(self.arrival_process)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SweepStatus {
    Feasible,
    Infeasible,
}

/// What the sweep did after a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    /// Closed-loop probe passed; lower bound established.
    Probe,
    /// Closed-loop probe violated the SLOs.
    Infeasible,
    /// Passed with no failing rate known yet: next rate is twice this one.
    Double,
    /// Passed below a known failing rate: next rate is the midpoint.
    Raise,
    /// Failed: next rate is the midpoint towards the best (or lower bound).
    Halve,
    Converged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTrial {
    pub trial: TrialResult,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_rate: Option<f64>,
    /// More than half of the requests errored.
    #[serde(default)]
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub status: SweepStatus,
    /// Requests per second; 0.0 when infeasible.
    pub best_rate: f64,
    pub lower_bound: f64,
    /// False when the trial budget ran out first.
    pub converged: bool,
    pub trials: Vec<SweepTrial>,
}

/// Compact view of a sweep for archives that do not need raw telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub status: SweepStatus,
    pub best_rate: f64,
    pub lower_bound: f64,
    pub converged: bool,
    pub open_loop_trials: usize,
    /// `(rate, passed)` for every open-loop trial in order.
    pub rates: Vec<(f64, bool)>,
}

impl SweepResult {
    pub fn open_loop_trials(&self) -> impl Iterator<Item = &SweepTrial> {
        self.trials.iter().filter(|t| t.trial.mode == TrialMode::OpenLoop)
    }

    /// Sum of trial durations in (virtual or wall) seconds.
    pub fn elapsed(&self) -> f64 {
        self.trials.iter().map(|t| t.trial.elapsed).sum()
    }

    pub fn summary(&self) -> SweepSummary {
        SweepSummary {
            status: self.status,
            best_rate: self.best_rate,
            lower_bound: self.lower_bound,
            converged: self.converged,
            open_loop_trials: self.open_loop_trials().count(),
            rates: self.open_loop_trials().map(|t| (t.trial.rate, t.trial.slo_pass)).collect(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep: {0}")]
    Invalid(#[from] ValidationError),
    #[error(transparent)]
    BackendUnavailable(#[from] BackendError),
}

fn execute(plan: &TrialPlan, backend: &mut dyn InferenceBackend) -> Result<(TrialResult, bool), SweepError> {
    match run_trial(plan, backend) {
        Ok(r) => Ok((r, false)),
        Err(LoadgenError::TrialAborted(r)) => Ok((*r, true)),
        Err(LoadgenError::BackendUnavailable(e)) => Err(e.into()),
        Err(LoadgenError::InvalidPlan(e)) => Err(e.into()),
    }
}

/// Finds the highest sustainable rate for `pattern` on `backend`.
pub fn run_sweep(
    config: &SweepConfig,
    pattern: &LoadPattern,
    backend: &mut dyn InferenceBackend,
) -> Result<SweepResult, SweepError> {
    config.validate()?;
    pattern.validate()?;
    backend.health_check()?;

    let mut trials = Vec::new();
    let lower_bound = if config.slos.is_empty() {
        config.initial_rate / 2.0
    } else {
        let (probe, aborted) = execute(&config.plan(TrialMode::ClosedLoop, 0.0, pattern), backend)?;
        let bound = closed_loop_lower_bound(&probe).ok().filter(|_| probe.slo_pass);
        match bound {
            Some(lb) => {
                log::info!("closed-loop probe passed; lower bound {lb:.3} req/s");
                trials.push(SweepTrial { trial: probe, decision: Decision::Probe, next_rate: None, aborted });
                lb
            }
            None => {
                log::info!("closed-loop probe violates SLOs; infeasible");
                trials.push(SweepTrial { trial: probe, decision: Decision::Infeasible, next_rate: None, aborted });
                return Ok(SweepResult {
                    status: SweepStatus::Infeasible,
                    best_rate: 0.0,
                    lower_bound: 0.0,
                    converged: true,
                    trials,
                });
            }
        }
    };

    let mut best: Option<f64> = None;
    let mut lowest_fail: Option<f64> = None;
    let mut rate = config.initial_rate;
    let mut converged = false;
    let mut open_loop = 0;

    while !converged && open_loop < config.budget {
        let (trial, aborted) = execute(&config.plan(TrialMode::OpenLoop, rate, pattern), backend)?;
        open_loop += 1;
        let passed = trial.slo_pass;
        let (mut next, mut decision) = if passed {
            best = Some(best.map_or(rate, |b| b.max(rate)));
            match lowest_fail {
                Some(fail) if fail > rate => ((rate + fail) / 2.0, Decision::Raise),
                _ => (rate * 2.0, Decision::Double),
            }
        } else {
            lowest_fail = Some(lowest_fail.map_or(rate, |f| f.min(rate)));
            let anchor = best.unwrap_or(lower_bound);
            let mut next = (anchor + rate) / 2.0;
            if best.is_none() && next <= lower_bound {
                next = (lower_bound * 1.01).max(lower_bound + f64::EPSILON);
            }
            (next, Decision::Halve)
        };
        let reference = best.unwrap_or(lower_bound);
        if (reference - next).abs() <= config.threshold.resolve(reference) {
            converged = true;
            decision = Decision::Converged;
        }
        log::debug!(
            "rate {rate:.3}: {} -> {decision:?} (next {next:.3})",
            if passed { "pass" } else { "fail" }
        );
        if converged {
            next = reference;
        }
        trials.push(SweepTrial {
            trial,
            decision,
            next_rate: (!converged).then_some(next),
            aborted,
        });
        rate = next;
    }

    Ok(SweepResult {
        status: if best.is_some() { SweepStatus::Feasible } else { SweepStatus::Infeasible },
        best_rate: best.unwrap_or(0.0),
        lower_bound,
        converged,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{compute_max_context, RuntimeConfig};
    use crate::sim::{SimBackend, SimServerModel};
    use crate::slo::{MetricKind, SloConstraint};

    fn single_slot(service: f64) -> (SimServerModel, LoadPattern) {
        // one prefill-only request per step: service = base + 100 / prefill_rate
        let pattern = LoadPattern::new(100, 1).with_duration(30.0);
        let mut model = SimServerModel::new(RuntimeConfig {
            tensor_parallel: 1,
            data_parallel: 1,
            max_num_seqs: 1,
            max_batched_tokens: 512,
            max_context: compute_max_context(&pattern),
        });
        model.prefill_rate = 10_000.0;
        model.decode_step_base = service - 0.01;
        (model, pattern)
    }

    #[test]
    fn capacity_eight_single_slot() {
        let (model, pattern) = single_slot(0.125);
        let mut backend = SimBackend::new(model).unwrap();
        let config = SweepConfig { threshold: Threshold::Absolute(0.25), ..SweepConfig::default() };
        let result = run_sweep(&config, &pattern, &mut backend).unwrap();
        assert_eq!(result.status, SweepStatus::Feasible);
        assert!(result.best_rate >= 8.0 * 0.9 && result.best_rate <= 8.0 * 1.05, "{}", result.best_rate);
        let rates: Vec<f64> = result.open_loop_trials().map(|t| t.trial.rate).take(4).collect();
        assert_eq!(rates, vec![1.0, 2.0, 4.0, 8.0]);
        assert!(result.converged);
        assert!(result.open_loop_trials().count() <= 12);
    }

    #[test]
    fn infeasible_probe_exits_early() {
        let (model, pattern) = single_slot(0.6);
        let mut backend = SimBackend::new(model).unwrap();
        let slos = SloSpec::new(vec![SloConstraint::new(MetricKind::E2eLatency, 95, 500.0)]);
        let result = run_sweep(&SweepConfig::default().with_slos(slos), &pattern, &mut backend).unwrap();
        assert_eq!(result.status, SweepStatus::Infeasible);
        assert_eq!(result.best_rate, 0.0);
        assert_eq!(result.trials.len(), 1);
        assert_eq!(result.trials[0].trial.mode, TrialMode::ClosedLoop);
        assert_eq!(result.trials[0].decision, Decision::Infeasible);
    }

    #[test]
    fn margin_rescues_probe() {
        let (model, pattern) = single_slot(0.52);
        let mut backend = SimBackend::new(model).unwrap();
        let slos = SloSpec::new(vec![SloConstraint::new(MetricKind::E2eLatency, 95, 500.0).with_margin(0.05)]);
        let result = run_sweep(&SweepConfig::default().with_slos(slos), &pattern, &mut backend).unwrap();
        assert_eq!(result.trials[0].decision, Decision::Probe);
        assert!((result.lower_bound - 1.0 / 0.52).abs() < 1e-6);
        assert_eq!(result.status, SweepStatus::Feasible);
    }

    #[test]
    fn throughput_oriented_skips_probe() {
        let (model, pattern) = single_slot(0.25);
        let mut backend = SimBackend::new(model).unwrap();
        let result = run_sweep(&SweepConfig::default(), &pattern, &mut backend).unwrap();
        assert!(result.trials.iter().all(|t| t.trial.mode == TrialMode::OpenLoop));
        assert_eq!(result.lower_bound, 0.5);
        assert!(result.best_rate >= 3.6 && result.best_rate <= 4.2, "{}", result.best_rate);
    }

    #[test]
    fn budget_is_respected_and_best_never_decreases() {
        let (model, pattern) = single_slot(0.013);
        let mut backend = SimBackend::new(model).unwrap();
        let config = SweepConfig { budget: 5, ..SweepConfig::default() };
        let result = run_sweep(&config, &pattern, &mut backend).unwrap();
        assert_eq!(result.open_loop_trials().count(), 5);
        assert!(!result.converged);
        assert_eq!(result.best_rate, 16.0);
        let mut best = 0.0f64;
        for t in result.open_loop_trials() {
            if t.trial.slo_pass {
                assert!(t.trial.rate >= best || t.decision != Decision::Double);
                best = best.max(t.trial.rate);
            }
            if t.decision == Decision::Double {
                assert!(t.trial.slo_pass);
            }
        }
    }

    #[test]
    fn no_pass_is_infeasible() {
        // service 3 s: even 1 req/s overloads the single slot
        let (model, pattern) = single_slot(3.0);
        let mut backend = SimBackend::new(model).unwrap();
        let config = SweepConfig { initial_rate: 1.0, ..SweepConfig::default() };
        let result = run_sweep(&config, &pattern, &mut backend).unwrap();
        assert!(result.open_loop_trials().count() <= 12);
        assert!(result.open_loop_trials().all(|t| !t.trial.slo_pass));
        assert_eq!(result.status, SweepStatus::Infeasible);
        assert_eq!(result.best_rate, 0.0);
    }

    #[test]
    fn reruns_are_identical() {
        let (model, pattern) = single_slot(0.1);
        let run = || {
            let mut backend = SimBackend::new(model.clone()).unwrap();
            serde_json::to_string(&run_sweep(&SweepConfig::default(), &pattern, &mut backend).unwrap()).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn threshold_resolution() {
        assert_eq!(Threshold::Relative(0.05).resolve(20.0), 1.0);
        assert_eq!(Threshold::Absolute(0.25).resolve(20.0), 0.25);
        let bad = SweepConfig { budget: 0, ..SweepConfig::default() };
        assert!(bad.validate().is_err());
    }
}
