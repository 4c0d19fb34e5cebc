//! SLO-driven capacity sweeps, steady-state diagnostics and runtime-config
//! tuning for LLM inference servers, plus a quantize-then-tune flow runner.

pub mod backend;
pub mod model;
pub mod sim;
pub mod slo;
pub mod steady_state;
pub mod loadgen;
pub mod sweep;
pub mod tuner;
pub mod calibration;
pub mod http;
pub mod flow;

pub use backend::{BackendError, InferenceBackend};
pub use calibration::{get_recipe, sample_calibration, Recipe, SamplingStrategy, Scheme, TokenCorpus};
pub use flow::{submit, validate_spec, Archive, FlowOutcome, JobSpec};
pub use http::{EndpointConfig, HttpBackend};
pub use loadgen::{run_trial, TrialPlan, TrialResult};
pub use model::{LoadPattern, RequestRecord, RuntimeConfig};
pub use sim::{SimBackend, SimProfile, SimServerModel};
pub use slo::{MetricKind, SloConstraint, SloSpec};
pub use steady_state::{fit_stability, StabilityDiagnostics};
pub use sweep::{run_sweep, SweepConfig, SweepResult, SweepStatus};
pub use tuner::{fitness, run_tuning, SearchSpace, TuneResult, TunerConfig};
