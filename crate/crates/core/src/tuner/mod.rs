//! Runtime-configuration search.
//!
//! Each trial builds a fresh backend for a proposed [`RuntimeConfig`], runs a
//! full sweep against it and scores the result with [`fitness`]. Throughput is
//! the sweep's best request rate, normalised by the GPUs the config occupies.

pub mod space;
pub mod tpe;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, InferenceBackend};
use crate::model::{LoadPattern, RuntimeConfig, ValidationError};
use crate::slo::SloSpec;
use crate::sweep::{run_sweep, SweepConfig, SweepResult, SweepStatus, SweepSummary};

pub use space::{IntRange, SearchSpace};
pub use tpe::{tpe_propose, TpeSettings};

pub const DEFAULT_PENALTY: f64 = -1000.0;

/// `throughput / gpus`, plus `lambda` when the SLOs are violated.
pub fn fitness(throughput: f64, gpus: u32, slo_violated: bool, lambda: f64) -> f64 {
    let base = throughput / f64::from(gpus.max(1));
    if slo_violated {
        base + lambda
    } else {
        base
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Tpe,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerConfig {
    #[serde(default = "defaults::n_trials")]
    pub n_trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default = "defaults::penalty")]
    pub penalty: f64,
    #[serde(default)]
    pub tpe: TpeSettings,
    /// Trials evaluated concurrently. Values above one use constant-liar
    /// imputation for pending proposals.
    #[serde(default = "defaults::parallelism")]
    pub parallelism: usize,
    /// Sweep settings for every trial; its SLOs are replaced by the tuning SLOs.
    #[serde(default)]
    pub sweep: SweepConfig,
}

mod defaults {
    pub fn n_trials() -> usize {
        30
    }
    pub fn penalty() -> f64 {
        super::DEFAULT_PENALTY
    }
    pub fn parallelism() -> usize {
        1
    }
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            n_trials: defaults::n_trials(),
            seed: 0,
            strategy: Strategy::Tpe,
            penalty: DEFAULT_PENALTY,
            tpe: TpeSettings::default(),
            parallelism: 1,
            sweep: SweepConfig::default(),
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.n_trials == 0 {
            return Err(ValidationError::new("n_trials", "must be at least 1"));
        }
        if self.parallelism == 0 {
            return Err(ValidationError::new("parallelism", "must be at least 1"));
        }
        if !(self.tpe.gamma > 0.0 && self.tpe.gamma < 1.0) {
            return Err(ValidationError::new("tpe.gamma", "must lie in (0, 1)"));
        }
        self.sweep.validate()
    }
}

/// What evaluating one configuration produced.
#[derive(Debug, Clone)]
pub enum Evaluation {
    Swept(Arc<SweepResult>),
    /// Backend construction or the sweep itself failed.
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct TuneTrial {
    pub index: usize,
    pub config: RuntimeConfig,
    pub sweep: Option<Arc<SweepResult>>,
    pub error: Option<String>,
    pub fitness: f64,
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub best_config: RuntimeConfig,
    pub best_fitness: f64,
    pub best_index: usize,
    pub seed: u64,
    pub trials: Vec<TuneTrial>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneTrialRecord {
    pub index: usize,
    pub config: RuntimeConfig,
    pub fitness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Serialisable form of a [`TuneResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneArchive {
    pub seed: u64,
    pub best_config: RuntimeConfig,
    pub best_fitness: f64,
    pub best_index: usize,
    pub trials: Vec<TuneTrialRecord>,
}

impl TuneResult {
    pub fn archive(&self) -> TuneArchive {
        TuneArchive {
            seed: self.seed,
            best_config: self.best_config,
            best_fitness: self.best_fitness,
            best_index: self.best_index,
            trials: self
                .trials
                .iter()
                .map(|t| TuneTrialRecord {
                    index: t.index,
                    config: t.config,
                    fitness: t.fitness,
                    sweep: t.sweep.as_ref().map(|s| s.summary()),
                    error: t.error.clone(),
                })
                .collect(),
        }
    }

    /// Highest fitness seen within the first `n` trials.
    pub fn best_within(&self, n: usize) -> f64 {
        self.trials.iter().take(n).map(|t| t.fitness).fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("invalid tuning request: {0}")]
    Invalid(#[from] ValidationError),
}

/// Builds a backend for one configuration.
pub type BackendFactory<'a> = dyn Fn(&RuntimeConfig) -> Result<Box<dyn InferenceBackend>, BackendError> + Sync + 'a;

fn score(eval: &Evaluation, config: &RuntimeConfig, penalty: f64) -> f64 {
    match eval {
        Evaluation::Swept(s) => fitness(s.best_rate, config.gpus(), s.status == SweepStatus::Infeasible, penalty),
        Evaluation::Failed(_) => penalty,
    }
}

/// Searches `space` for the configuration with the highest fitness, running
/// a full sweep of `pattern` under `slos` for each proposal.
pub fn run_tuning(
    space: &SearchSpace,
    pattern: &LoadPattern,
    slos: &SloSpec,
    backend_factory: &BackendFactory<'_>,
    config: &TunerConfig,
) -> Result<TuneResult, TuneError> {
    pattern.validate()?;
    space.validate(pattern, None)?;
    let sweep_config = SweepConfig { slos: slos.clone(), ..config.sweep.clone() };
    let evaluate = |c: &RuntimeConfig| -> Evaluation {
        let mut backend = match backend_factory(c) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("backend construction failed for {c:?}: {e}");
                return Evaluation::Failed(e.to_string());
            }
        };
        let outcome = match run_sweep(&sweep_config, pattern, backend.as_mut()) {
            Ok(s) => Evaluation::Swept(Arc::new(s)),
            Err(e) => Evaluation::Failed(e.to_string()),
        };
        drop(backend);
        outcome
    };
    run_tuning_with(space, &evaluate, config)
}

/// The search loop with a caller-supplied evaluation function.
pub fn run_tuning_with(
    space: &SearchSpace,
    evaluate: &(dyn Fn(&RuntimeConfig) -> Evaluation + Sync),
    config: &TunerConfig,
) -> Result<TuneResult, TuneError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history: Vec<(RuntimeConfig, f64)> = Vec::with_capacity(config.n_trials);
    let mut trials: Vec<TuneTrial> = Vec::with_capacity(config.n_trials);

    while trials.len() < config.n_trials {
        let batch = config.parallelism.min(config.n_trials - trials.len());
        let liar = history.iter().map(|h| h.1).fold(f64::INFINITY, f64::min);
        let mut pending: Vec<RuntimeConfig> = Vec::with_capacity(batch);
        for _ in 0..batch {
            let proposal = match config.strategy {
                Strategy::Random => tpe::uniform_propose(space, &mut rng),
                Strategy::Tpe if pending.is_empty() => tpe_propose(&history, space, &config.tpe, &mut rng),
                Strategy::Tpe => {
                    let lie = if liar.is_finite() { liar } else { 0.0 };
                    let mut imputed = history.clone();
                    imputed.extend(pending.iter().map(|c| (*c, lie)));
                    tpe_propose(&imputed, space, &config.tpe, &mut rng)
                }
            };
            pending.push(proposal);
        }

        let evaluations: Vec<Evaluation> = if batch == 1 {
            vec![evaluate(&pending[0])]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = pending.iter().map(|c| scope.spawn(move || evaluate(c))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Evaluation::Failed("evaluation panicked".into())))
                    .collect()
            })
        };

        for (c, eval) in pending.into_iter().zip(evaluations) {
            let f = score(&eval, &c, config.penalty);
            log::info!("trial {}: {c:?} fitness {f:.4}", trials.len());
            history.push((c, f));
            let (sweep, error) = match eval {
                Evaluation::Swept(s) => (Some(s), None),
                Evaluation::Failed(e) => (None, Some(e)),
            };
            trials.push(TuneTrial { index: trials.len(), config: c, sweep, error, fitness: f });
        }
    }

    let best = trials
        .iter()
        .fold(&trials[0], |best, t| if t.fitness > best.fitness { t } else { best });
    Ok(TuneResult {
        best_config: best.config,
        best_fitness: best.fitness,
        best_index: best.index,
        seed: config.seed,
        trials,
    })
}
