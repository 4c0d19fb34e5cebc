//! Staged optimisation pipeline.
//!
//! A flow runs fetch, compression trials, evaluation, benchmarking and tuning
//! in strict sequence. Each parallel stage gets its own [`StagePool`] whose
//! slots come from a shared [`ResourceLedger`] and are returned when the pool
//! is destroyed, before the next stage starts. Every stage's trials are
//! recorded in the [`Archive`] with a terminal status.

pub mod archive;
pub mod pool;
pub mod spec;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendError, Driver, InferenceBackend, VOCAB_SIZE};
use crate::calibration::{
    derive_distinct_subsets, run_compression, Artifact, CompressionBackend, CompressionError, CompressionRequest,
    MockCompressionBackend, Recipe, Scheme, TokenCorpus,
};
use crate::http::HttpBackend;
use crate::model::RuntimeConfig;
use crate::sim::{SimBackend, SimProfile};
use crate::sweep::{run_sweep, SweepConfig, SweepResult};
use crate::tuner::{run_tuning, TuneResult};

pub use archive::{archive_dir, Archive, ArchiveRecord, FlowStatus, FlowSummary, SelectedArtifact, ARCHIVE_DIR_ENV};
pub use pool::{Attempt, AttemptError, ResourceLedger, StagePool, TrialStatus};
pub use spec::{load_spec, parse_spec, validate_spec, BackendSpec, JobSpec, ModelRef, SpecError, StageKind};

/// Virtual seconds charged for a compression attempt that failed.
pub const FAILED_ATTEMPT_SECONDS: f64 = 5.0;
/// Virtual seconds per evaluation.
pub const EVALUATION_SECONDS: f64 = 10.0;

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("model weights not found at {0}")]
    ModelMissing(String),
    #[error("corpus: {0}")]
    Corpus(String),
}

/// Where models and calibration data come from.
pub trait Storage: Send + Sync {
    /// Returns the reference compression backends receive.
    fn fetch_model(&self, model: &ModelRef) -> Result<String, FetchError>;
    /// Loads `path`, or synthesises a corpus of at least `min_len` sequences.
    fn fetch_corpus(&self, path: Option<&Path>, seed: u64, min_len: usize) -> Result<TokenCorpus, FetchError>;
}

/// Reads from the local filesystem.
#[derive(Debug, Default, Clone, Copy)]
pub struct LocalStorage;

impl Storage for LocalStorage {
    fn fetch_model(&self, model: &ModelRef) -> Result<String, FetchError> {
        match &model.path {
            Some(p) if !p.exists() => Err(FetchError::ModelMissing(p.display().to_string())),
            Some(p) => Ok(p.display().to_string()),
            None => Ok(model.reference()),
        }
    }

    fn fetch_corpus(&self, path: Option<&Path>, seed: u64, min_len: usize) -> Result<TokenCorpus, FetchError> {
        match path {
            Some(p) => TokenCorpus::from_jsonl(p).map_err(|e| FetchError::Corpus(e.to_string())),
            None => Ok(synthetic_corpus(seed, min_len.max(64))),
        }
    }
}

/// Deterministic stand-in corpus with varied lengths and token ranges.
pub fn synthetic_corpus(seed: u64, len: usize) -> TokenCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = (0..len)
        .map(|_| {
            let n = rng.random_range(16..=256);
            let base = rng.random_range(0..VOCAB_SIZE / 2);
            (0..n).map(|_| base + rng.random_range(0..VOCAB_SIZE / 2)).collect()
        })
        .collect();
    TokenCorpus { sequences, provenance: [("source".to_string(), format!("synthetic:{seed}"))].into() }
}

/// Quality score for a compressed artifact; higher is better.
pub trait Scorer: Send + Sync {
    fn score(&self, artifact: &Artifact) -> Result<f64, String>;
}

/// Hashes the artifact reference to a stable score in `[0, 1]`.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockScorer;

impl Scorer for MockScorer {
    fn score(&self, artifact: &Artifact) -> Result<f64, String> {
        let d = Sha256::digest(artifact.artifact_ref.as_bytes());
        Ok((u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) >> 11) as f64 / ((1u64 << 53) - 1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub trial: usize,
    pub seed: u64,
    pub score: f64,
    pub artifact: Artifact,
}

/// Highest score wins; ties go to the lowest seed.
pub fn select_representative(candidates: &[Candidate]) -> Option<&Candidate> {
    candidates
        .iter()
        .min_by(|a, b| b.score.total_cmp(&a.score).then(a.seed.cmp(&b.seed)))
}

/// Relative speed of a compressed model on the simulated server.
pub fn scheme_speedup(scheme: Scheme) -> f64 {
    match scheme {
        Scheme::Fp8Dynamic => 1.6,
        Scheme::IntW8a8 => 1.5,
        Scheme::IntW4a16 => 1.8,
    }
}

/// External collaborators of a flow run.
pub struct FlowContext<'a> {
    pub storage: &'a dyn Storage,
    pub compression: Vec<&'a dyn CompressionBackend>,
    pub scorer: &'a dyn Scorer,
}

#[derive(Debug, Clone)]
pub struct FlowOutcome {
    pub status: FlowStatus,
    pub q_star: Option<Candidate>,
    pub c_star: Option<RuntimeConfig>,
    pub tuning: Option<TuneResult>,
    pub archive: Archive,
}

/// Holds a backend's slots for as long as the backend lives.
struct Reserved<B> {
    backend: B,
    _slots: pool::Reservation,
}

impl<B: InferenceBackend> InferenceBackend for Reserved<B> {
    fn describe(&self) -> String {
        self.backend.describe()
    }

    fn health_check(&mut self) -> Result<(), BackendError> {
        self.backend.health_check()
    }

    fn driver(&mut self) -> Driver<'_> {
        self.backend.driver()
    }
}

struct Run<'a> {
    spec: &'a JobSpec,
    ctx: &'a FlowContext<'a>,
    ledger: ResourceLedger,
    archive: Archive,
    virtual_seconds: f64,
}

impl Run<'_> {
    fn finish(mut self, status: FlowStatus, reason: Option<String>, q_star: Option<Candidate>, tuning: Option<TuneResult>) -> FlowOutcome {
        let c_star = tuning.as_ref().map(|t| t.best_config);
        self.archive.push(ArchiveRecord::Result(FlowSummary {
            status,
            reason,
            q_star: q_star.as_ref().map(|q| SelectedArtifact {
                trial: q.trial,
                seed: q.seed,
                artifact: q.artifact.artifact_ref.clone(),
                score: q.score,
            }),
            c_star,
            c_star_fitness: tuning.as_ref().map(|t| t.best_fitness),
            virtual_seconds: self.virtual_seconds,
            peak_slots: self.archive.stages().map(|s| s.slots).max().unwrap_or(0),
        }));
        FlowOutcome { status, q_star, c_star, tuning, archive: self.archive }
    }

    fn fail(self, reason: impl Into<String>) -> FlowOutcome {
        let reason = reason.into();
        log::warn!("flow {} failed: {reason}", self.spec.name);
        self.finish(FlowStatus::Failed, Some(reason), None, None)
    }

    fn stage_record(&mut self, stage: &str, workers: usize, slots: usize, trials: &[archive::TrialRecord], makespan: f64) {
        let count = |s: TrialStatus| trials.iter().filter(|t| t.status == s).count();
        self.virtual_seconds += makespan;
        self.archive.push(ArchiveRecord::Stage(archive::StageRecord {
            stage: stage.to_string(),
            workers,
            slots,
            launched: trials.len() - count(TrialStatus::Excluded),
            ok: count(TrialStatus::Ok),
            failed: count(TrialStatus::Failed),
            excluded: count(TrialStatus::Excluded),
            virtual_seconds: makespan,
            slots_in_use_after: self.ledger.allocated(),
        }));
        for t in trials {
            self.archive.push(ArchiveRecord::Trial(t.clone()));
        }
    }

    fn compression(&mut self, recipe: &Recipe, model_ref: &str, subsets: &[(u64, TokenCorpus)]) -> Vec<Option<Artifact>> {
        let workers = self.ledger.budget().min(subsets.len());
        let mut pool = match StagePool::create("compression", &self.ledger, workers, 1, self.spec.flow_params.retry_budget) {
            Ok(p) => p,
            Err(e) => {
                log::error!("cannot create compression pool: {e}");
                return vec![None; subsets.len()];
            }
        };
        let backends = &self.ctx.compression;
        let outcomes = pool
            .run(subsets, |_, (seed, calibration), attempt| {
                let request = CompressionRequest { recipe, model_ref, calibration, seed: *seed, attempt };
                match run_compression(&request, backends) {
                    Ok(a) => Attempt { cost: a.virtual_seconds, result: Ok(a) },
                    Err(e @ CompressionError::Transient(_)) => {
                        Attempt { result: Err(AttemptError::Transient(e.to_string())), cost: FAILED_ATTEMPT_SECONDS }
                    }
                    Err(e) => Attempt { result: Err(AttemptError::Persistent(e.to_string())), cost: FAILED_ATTEMPT_SECONDS },
                }
            })
            .expect("fresh pool");
        pool.destroy();
        let records: Vec<_> = outcomes
            .iter()
            .map(|o| archive::TrialRecord {
                stage: "compression".into(),
                trial: o.index,
                seed: subsets[o.index].0,
                status: o.status(),
                attempts: o.attempts,
                worker: Some(o.worker),
                virtual_start: o.start,
                virtual_end: o.end,
                error: o.result.as_ref().err().cloned(),
                artifact: o.result.as_ref().ok().map(|a| a.artifact_ref.clone()),
                score: None,
            })
            .collect();
        let makespan = outcomes.iter().map(|o| o.end).fold(0.0, f64::max);
        self.stage_record("compression", workers, workers, &records, makespan);
        outcomes.into_iter().map(|o| o.result.ok()).collect()
    }

    fn evaluation(&mut self, seeds: &[u64], artifacts: Vec<Option<Artifact>>) -> Vec<Candidate> {
        let launched: Vec<(usize, Artifact)> =
            artifacts.into_iter().enumerate().filter_map(|(i, a)| a.map(|a| (i, a))).collect();
        let workers = self.ledger.budget().min(launched.len());
        let mut pool = StagePool::create("evaluation", &self.ledger, workers, 1, self.spec.flow_params.retry_budget)
            .expect("ledger is empty between stages");
        let scorer = self.ctx.scorer;
        let outcomes = pool
            .run(&launched, |_, (_, artifact), _| match scorer.score(artifact) {
                Ok(s) => Attempt { result: Ok(s), cost: EVALUATION_SECONDS },
                Err(e) => Attempt { result: Err(AttemptError::Persistent(e)), cost: EVALUATION_SECONDS },
            })
            .expect("fresh pool");
        pool.destroy();

        let mut records: Vec<archive::TrialRecord> = (0..seeds.len())
            .map(|trial| archive::TrialRecord {
                stage: "evaluation".into(),
                trial,
                seed: seeds[trial],
                status: TrialStatus::Excluded,
                attempts: 0,
                worker: None,
                virtual_start: 0.0,
                virtual_end: 0.0,
                error: Some("compression failed".into()),
                artifact: None,
                score: None,
            })
            .collect();
        let mut candidates = Vec::new();
        for o in &outcomes {
            let (trial, artifact) = &launched[o.index];
            let r = &mut records[*trial];
            r.status = o.status();
            r.attempts = o.attempts;
            r.worker = Some(o.worker);
            r.virtual_start = o.start;
            r.virtual_end = o.end;
            r.error = o.result.as_ref().err().cloned();
            r.artifact = Some(artifact.artifact_ref.clone());
            r.score = o.result.as_ref().ok().copied();
            if let Ok(score) = o.result {
                candidates.push(Candidate { trial: *trial, seed: seeds[*trial], score, artifact: artifact.clone() });
            }
        }
        let makespan = outcomes.iter().map(|o| o.end).fold(0.0, f64::max);
        self.stage_record("evaluation", workers, workers, &records, makespan);
        candidates
    }

    fn sweep_config(&self) -> SweepConfig {
        SweepConfig { slos: self.spec.flow_params.slos.clone(), ..self.spec.flow_params.sweep.clone() }
    }

    fn build_backend(&self, profile: Option<&SimProfile>, config: RuntimeConfig) -> Result<Box<dyn InferenceBackend>, BackendError> {
        match &self.spec.backend {
            BackendSpec::Http(endpoint) => Ok(Box::new(HttpBackend::new(endpoint.clone())?)),
            BackendSpec::Sim(base) => Ok(Box::new(SimBackend::new(profile.unwrap_or(base).model(config))?)),
        }
    }

    /// Sweeps each `(target, profile)`; returns the sweeps in order.
    fn benchmark(&mut self, targets: &[(String, Option<SimProfile>)]) -> Vec<Option<SweepResult>> {
        let config = self.spec.benchmark_config();
        let per_worker = config.gpus() as usize;
        let workers = (self.ledger.budget() / per_worker).clamp(1, targets.len());
        let mut pool = match StagePool::create("benchmark", &self.ledger, workers, per_worker, 0) {
            Ok(p) => p,
            Err(e) => {
                log::error!("cannot create benchmark pool: {e}");
                return vec![None; targets.len()];
            }
        };
        let pattern = self.spec.pattern();
        let sweep_config = self.sweep_config();
        let this = &*self;
        let outcomes = pool
            .run(targets, |_, (target, profile), _| {
                let result = this
                    .build_backend(profile.as_ref(), config)
                    .map_err(|e| e.to_string())
                    .and_then(|mut b| run_sweep(&sweep_config, &pattern, b.as_mut()).map_err(|e| e.to_string()));
                match result {
                    Ok(s) => Attempt { cost: s.elapsed(), result: Ok(s) },
                    Err(e) => Attempt { result: Err(AttemptError::Persistent(format!("{target}: {e}"))), cost: 0.0 },
                }
            })
            .expect("fresh pool");
        pool.destroy();
        let records: Vec<_> = outcomes
            .iter()
            .map(|o| archive::TrialRecord {
                stage: "benchmark".into(),
                trial: o.index,
                seed: self.spec.flow_params.seed,
                status: o.status(),
                attempts: o.attempts,
                worker: Some(o.worker),
                virtual_start: o.start,
                virtual_end: o.end,
                error: o.result.as_ref().err().cloned(),
                artifact: Some(targets[o.index].0.clone()),
                score: o.result.as_ref().ok().map(|s| s.best_rate),
            })
            .collect();
        let makespan = outcomes.iter().map(|o| o.end).fold(0.0, f64::max);
        self.stage_record("benchmark", workers, workers * per_worker, &records, makespan);
        let mut out = Vec::with_capacity(targets.len());
        for o in outcomes {
            if let Ok(s) = &o.result {
                self.archive.push(ArchiveRecord::Sweep {
                    target: targets[o.index].0.clone(),
                    config: Some(config),
                    sweep: s.clone(),
                });
            }
            out.push(o.result.ok());
        }
        out
    }

    fn tuning(&mut self, profile: SimProfile) -> Result<TuneResult, String> {
        let space = self.spec.search_space();
        let pattern = self.spec.pattern();
        let widest = space.enumerate().iter().map(RuntimeConfig::gpus).max().unwrap_or(1) as usize;
        let mut tuner = self.spec.flow_params.tuner.clone();
        tuner.parallelism = tuner.parallelism.clamp(1, (self.ledger.budget() / widest).max(1));
        tuner.sweep = self.spec.flow_params.sweep.clone();
        let ledger = self.ledger.clone();
        let factory = move |c: &RuntimeConfig| -> Result<Box<dyn InferenceBackend>, BackendError> {
            let slots = ledger.reserve(c.gpus() as usize).map_err(|e| BackendError::Construction(e.to_string()))?;
            let backend = SimBackend::new(profile.model(*c))?;
            Ok(Box::new(Reserved { backend, _slots: slots }))
        };
        let result = run_tuning(&space, &pattern, &self.spec.flow_params.slos, &factory, &tuner).map_err(|e| e.to_string())?;

        // Trials run in synchronous batches of `parallelism`.
        let mut placement = Vec::with_capacity(result.trials.len());
        let mut batch_start = 0.0;
        let mut peak = 0;
        for batch in result.trials.chunks(tuner.parallelism) {
            let mut batch_end = batch_start;
            for (worker, t) in batch.iter().enumerate() {
                let end = batch_start + t.sweep.as_ref().map_or(0.0, |s| s.elapsed());
                placement.push((worker, batch_start, end));
                batch_end = f64::max(batch_end, end);
            }
            peak = peak.max(batch.iter().map(|t| t.config.gpus() as usize).sum());
            batch_start = batch_end;
        }
        let records: Vec<_> = result
            .trials
            .iter()
            .zip(placement)
            .map(|(t, (worker, start, end))| archive::TrialRecord {
                stage: "tuning".into(),
                trial: t.index,
                seed: result.seed,
                status: if t.error.is_none() { TrialStatus::Ok } else { TrialStatus::Failed },
                attempts: 1,
                worker: Some(worker),
                virtual_start: start,
                virtual_end: end,
                error: t.error.clone(),
                artifact: None,
                score: Some(t.fitness),
            })
            .collect();
        let makespan = records.iter().map(|r| r.virtual_end).fold(0.0, f64::max);
        self.stage_record("tuning", tuner.parallelism, peak, &records, makespan);
        self.archive.push(ArchiveRecord::Tuning(result.archive()));
        Ok(result)
    }
}

/// Runs the stages of `spec`'s flow.
pub fn run_flow(spec: &JobSpec, ctx: &FlowContext<'_>) -> FlowOutcome {
    run_stages(spec, ctx, spec.descriptor().stages)
}

/// Compression, evaluation, benchmark and tuning, whatever the spec's flow.
pub fn run_quantize_tune_flow(spec: &JobSpec, ctx: &FlowContext<'_>) -> FlowOutcome {
    run_stages(spec, ctx, spec::lookup_flow("quantize_tune").expect("registered").stages)
}

fn run_stages(spec: &JobSpec, ctx: &FlowContext<'_>, stages: &[StageKind]) -> FlowOutcome {
    let params = &spec.flow_params;
    let spec_value = serde_json::to_value(spec).unwrap_or(Value::Null);
    let mut run = Run {
        spec,
        ctx,
        ledger: ResourceLedger::new(spec.resources.slots),
        archive: Archive::new("flow", &spec.name, params.seed, spec_value),
        virtual_seconds: 0.0,
    };
    let has = |s| stages.contains(&s);

    let model_ref = match ctx.storage.fetch_model(&spec.model) {
        Ok(m) => m,
        Err(e) => return run.fail(format!("fetch: {e}")),
    };

    let mut q_star = None;
    let mut profile = match &spec.backend {
        BackendSpec::Sim(p) => Some(p.clone()),
        BackendSpec::Http(_) => None,
    };
    if has(StageKind::Compression) {
        let recipe = match spec.recipe_registry().get(params.quantization_recipe.as_deref().unwrap_or_default()) {
            Ok(r) => r.clone(),
            Err(e) => return run.fail(e.to_string()),
        };
        let trials = params.num_trials.unwrap_or(1);
        let corpus = if recipe.scheme.needs_calibration() {
            match ctx.storage.fetch_corpus(spec.corpus.as_deref(), params.seed, recipe.calibration_samples * 4) {
                Ok(c) => c,
                Err(e) => return run.fail(format!("fetch: {e}")),
            }
        } else {
            TokenCorpus::default()
        };
        let subsets = match derive_distinct_subsets(&corpus, &recipe, params.seed, trials) {
            Ok(s) => s,
            Err(e) => return run.fail(format!("calibration sampling: {e}")),
        };
        let seeds: Vec<u64> = subsets.iter().map(|(s, _)| *s).collect();
        let artifacts = run.compression(&recipe, &model_ref, &subsets);
        if artifacts.iter().all(Option::is_none) {
            return run.fail("every compression trial failed");
        }
        let candidates = if has(StageKind::Evaluation) {
            run.evaluation(&seeds, artifacts)
        } else {
            artifacts
                .into_iter()
                .enumerate()
                .filter_map(|(i, a)| a.map(|artifact| Candidate { trial: i, seed: seeds[i], score: 0.0, artifact }))
                .collect()
        };
        let Some(best) = select_representative(&candidates).cloned() else {
            return run.fail("no compressed candidate passed evaluation");
        };
        log::info!("representative: trial {} ({})", best.trial, best.artifact.artifact_ref);
        profile = profile.map(|p| p.accelerated(scheme_speedup(recipe.scheme)));
        q_star = Some(best);
    }

    if has(StageKind::Benchmark) {
        let mut targets = Vec::new();
        if q_star.is_some() {
            targets.push(("quantized".to_string(), profile.clone()));
        }
        if q_star.is_none() || params.include_baseline {
            let baseline = match &spec.backend {
                BackendSpec::Sim(p) => Some(p.clone()),
                BackendSpec::Http(_) => None,
            };
            targets.push(("baseline".to_string(), baseline));
        }
        let sweeps = run.benchmark(&targets);
        if sweeps.first().is_none_or(Option::is_none) {
            return run.fail("benchmark of the selected model failed");
        }
    }

    let mut tuning = None;
    if has(StageKind::Tuning) {
        let Some(p) = profile.clone() else {
            return run.fail("tuning needs a simulated backend");
        };
        match run.tuning(p) {
            Ok(t) => tuning = Some(t),
            Err(e) => return run.fail(format!("tuning: {e}")),
        }
    }

    run.finish(FlowStatus::Ok, None, q_star, tuning)
}

/// Runs `spec` with local storage, the mock compression backend (using the
/// spec's failure injection) and the mock scorer.
pub fn submit(spec: &JobSpec) -> FlowOutcome {
    let backend = MockCompressionBackend::new().with_failures(spec.flow_params.mock_failures.clone());
    let ctx = FlowContext { storage: &LocalStorage, compression: vec![&backend], scorer: &MockScorer };
    run_flow(spec, &ctx)
}

/// Validates a raw JSON job and runs it.
pub fn validate_and_submit(value: &Value) -> Result<FlowOutcome, SpecError> {
    Ok(submit(&validate_spec(value)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::FailureInjection;
    use serde_json::json;

    fn artifact(name: &str) -> Artifact {
        MockCompressionBackend::new()
            .compress(&CompressionRequest {
                recipe: &crate::calibration::get_recipe("fp8_dynamic").unwrap(),
                model_ref: name,
                calibration: &TokenCorpus::default(),
                seed: 0,
                attempt: 0,
            })
            .unwrap()
    }

    fn cand(score: f64, seed: u64) -> Candidate {
        Candidate { trial: seed as usize, seed, score, artifact: artifact("m") }
    }

    #[test]
    fn representative_selection() {
        assert_eq!(select_representative(&[cand(0.1, 9)]).unwrap().seed, 9);
        let c = [cand(0.80, 3), cand(0.82, 1), cand(0.82, 2)];
        assert_eq!(select_representative(&c).unwrap().seed, 1);
        let c = [cand(0.5, 7), cand(0.5, 4), cand(0.5, 6)];
        assert_eq!(select_representative(&c).unwrap().seed, 4);
        assert!(select_representative(&[]).is_none());
    }

    #[test]
    fn mock_scorer_is_stable_and_bounded() {
        let a = artifact("x");
        let s = MockScorer.score(&a).unwrap();
        assert_eq!(s, MockScorer.score(&a).unwrap());
        assert!((0.0..=1.0).contains(&s));
    }

    fn spec(flow: &str, failures: FailureInjection) -> JobSpec {
        validate_spec(&json!({
            "name": "unit",
            "flow": flow,
            "model": {"name": "tiny"},
            "flow_params": {
                "quantization_recipe": "int_w8a8",
                "num_trials": 5,
                "seed": 4,
                "load_pattern": {"input_len": 256, "output_len": 32, "duration": 10.0},
                "tuner": {"n_trials": 3, "seed": 1},
                "sweep": {"budget": 5},
                "mock_failures": failures,
            },
            "resources": {"slots": 2}
        }))
        .unwrap()
    }

    #[test]
    fn five_trials_two_slots() {
        let out = submit(&spec("quantization", FailureInjection::default()));
        assert_eq!(out.status, FlowStatus::Ok);
        let compression = out.archive.stages().find(|s| s.stage == "compression").unwrap();
        // mock cost: 30 s + 0.05 s x 256 samples per trial, three waves
        assert!((compression.virtual_seconds - 3.0 * (30.0 + 0.05 * 256.0)).abs() < 1e-9);
        assert_eq!(compression.slots_in_use_after, 0);
        assert_eq!(out.archive.trials().filter(|t| t.stage == "compression").count(), 5);
    }

    #[test]
    fn all_persistent_failures() {
        let failures = FailureInjection { persistent_probability: 1.0, ..FailureInjection::default() };
        let out = submit(&spec("quantize_tune", failures));
        assert_eq!(out.status, FlowStatus::Failed);
        let failed: Vec<_> = out.archive.trials().collect();
        assert_eq!(failed.len(), 5);
        assert!(failed.iter().all(|t| t.status == TrialStatus::Failed && t.stage == "compression"));
        assert!(out.archive.sweeps().next().is_none());
        assert!(out.tuning.is_none());
    }

    #[test]
    fn transient_failure_is_retried() {
        let s = spec("quantization", FailureInjection::default());
        let seeds: Vec<u64> = (0..5).map(|i| crate::calibration::sampling::derive_seed(4, i, 0)).collect();
        let failures = FailureInjection { transient_seeds: [(seeds[2], 1)].into(), ..FailureInjection::default() };
        let out = submit(&JobSpec { flow_params: spec::FlowParams { mock_failures: failures, ..s.flow_params.clone() }, ..s });
        let t = out.archive.trials().find(|t| t.stage == "compression" && t.trial == 2).unwrap();
        assert_eq!((t.status, t.attempts), (TrialStatus::Ok, 2));
    }

    #[test]
    fn full_flow_is_reproducible() {
        let run = || submit(&spec("quantize_tune", FailureInjection { transient_probability: 0.3, seed: 2, ..Default::default() }));
        let (a, b) = (run(), run());
        assert_eq!(a.status, FlowStatus::Ok);
        assert!(a.c_star.is_some() && a.q_star.is_some());
        assert_eq!(a.archive.to_jsonl(), b.archive.to_jsonl());
        assert!(a.archive.summary().unwrap().peak_slots <= 2);
        assert!(a.archive.stages().all(|s| s.slots_in_use_after == 0));
    }

    #[test]
    fn missing_model_fails_fetch() {
        let mut s = spec("quantization", FailureInjection::default());
        s.model.path = Some("/definitely/not/here".into());
        let out = submit(&s);
        assert_eq!(out.status, FlowStatus::Failed);
        assert!(out.archive.summary().unwrap().reason.as_deref().unwrap().starts_with("fetch"));
    }
}
