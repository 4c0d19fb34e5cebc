//! The compression-backend boundary and an in-process mock.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Recipe, Scheme, TokenCorpus};

#[derive(Debug, Clone, Copy)]
pub struct CompressionRequest<'a> {
    pub recipe: &'a Recipe,
    pub model_ref: &'a str,
    pub calibration: &'a TokenCorpus,
    pub seed: u64,
    /// Zero on the first try, incremented on each retry.
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub model_ref: String,
    pub recipe: String,
    pub scheme: Scheme,
    pub calibration_fingerprint: String,
    pub calibration_samples: usize,
    pub seed: u64,
    pub layer_exclusions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub artifact_ref: String,
    pub manifest: ArtifactManifest,
    /// Simulated compression time in seconds.
    pub virtual_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompressionError {
    #[error("no compression backend supports {0:?}")]
    BackendMissing(Scheme),
    #[error("calibration set has {available} sequences, recipe needs {needed}")]
    CalibrationMismatch { needed: usize, available: usize },
    /// Worth retrying.
    #[error("transient compression failure: {0}")]
    Transient(String),
    #[error("compression failed: {0}")]
    Persistent(String),
}

impl CompressionError {
    pub fn is_transient(&self) -> bool {
        matches!(self, CompressionError::Transient(_))
    }
}

pub trait CompressionBackend: Send + Sync {
    fn name(&self) -> &str;
    fn supports(&self, scheme: Scheme) -> bool;
    fn compress(&self, request: &CompressionRequest<'_>) -> Result<Artifact, CompressionError>;
}

/// Deterministic failure script for [`MockCompressionBackend`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureInjection {
    /// Chance that any single attempt fails transiently.
    #[serde(default)]
    pub transient_probability: f64,
    /// Chance that a trial seed fails on every attempt.
    #[serde(default)]
    pub persistent_probability: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub persistent_seeds: BTreeSet<u64>,
    /// Trial seed to number of leading attempts that fail transiently.
    #[serde(default)]
    pub transient_seeds: BTreeMap<u64, u32>,
}

impl FailureInjection {
    fn unit(&self, tag: &str, seed: u64, attempt: u32) -> f64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(tag.as_bytes());
        h.update(seed.to_le_bytes());
        h.update(attempt.to_le_bytes());
        let d = h.finalize();
        (u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn check(&self, seed: u64, attempt: u32) -> Result<(), CompressionError> {
        if self.persistent_seeds.contains(&seed) || self.unit("persistent", seed, 0) < self.persistent_probability {
            return Err(CompressionError::Persistent(format!("injected persistent failure for seed {seed}")));
        }
        let scripted = self.transient_seeds.get(&seed).is_some_and(|&n| attempt < n);
        if scripted || self.unit("transient", seed, attempt) < self.transient_probability {
            return Err(CompressionError::Transient(format!("injected transient failure for seed {seed}, attempt {attempt}")));
        }
        Ok(())
    }
}

/// Emits a manifest instead of touching model weights.
#[derive(Debug, Default)]
pub struct MockCompressionBackend {
    /// Virtual seconds per call.
    pub base_cost: f64,
    /// Extra virtual seconds per calibration sequence.
    pub per_sample_cost: f64,
    /// Wall-clock seconds slept per virtual second (zero disables sleeping).
    pub real_time_scale: f64,
    pub failures: FailureInjection,
    calls: Mutex<Vec<ArtifactManifest>>,
}

impl MockCompressionBackend {
    pub fn new() -> Self {
        Self { base_cost: 30.0, per_sample_cost: 0.05, ..Self::default() }
    }

    pub fn with_failures(mut self, failures: FailureInjection) -> Self {
        self.failures = failures;
        self
    }

    pub fn with_real_time_scale(mut self, scale: f64) -> Self {
        self.real_time_scale = scale;
        self
    }

    /// Manifests of every call that got past failure injection.
    pub fn calls(&self) -> Vec<ArtifactManifest> {
        self.calls.lock().expect("mock call log").clone()
    }
}

impl CompressionBackend for MockCompressionBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn supports(&self, _scheme: Scheme) -> bool {
        true
    }

    fn compress(&self, request: &CompressionRequest<'_>) -> Result<Artifact, CompressionError> {
        self.failures.check(request.seed, request.attempt)?;
        let manifest = ArtifactManifest {
            model_ref: request.model_ref.to_string(),
            recipe: request.recipe.name.clone(),
            scheme: request.recipe.scheme,
            calibration_fingerprint: request.calibration.fingerprint(),
            calibration_samples: request.calibration.len(),
            seed: request.seed,
            layer_exclusions: request.recipe.layer_exclusions.clone(),
        };
        let digest = Sha256::digest(serde_json::to_vec(&manifest).expect("manifest serialises"));
        let virtual_seconds = self.base_cost + self.per_sample_cost * request.calibration.len() as f64;
        if self.real_time_scale > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(virtual_seconds * self.real_time_scale));
        }
        self.calls.lock().expect("mock call log").push(manifest.clone());
        Ok(Artifact {
            artifact_ref: format!("artifact://{}/{}/{}", request.model_ref, request.recipe.name, &hex::encode(digest)[..16]),
            manifest,
            virtual_seconds,
        })
    }
}

/// Hands `request` to the first backend that supports its scheme.
pub fn run_compression(
    request: &CompressionRequest<'_>,
    backends: &[&dyn CompressionBackend],
) -> Result<Artifact, CompressionError> {
    let scheme = request.recipe.scheme;
    let backend = backends
        .iter()
        .find(|b| b.supports(scheme))
        .ok_or(CompressionError::BackendMissing(scheme))?;
    let needed = request.recipe.calibration_samples;
    if request.calibration.len() != needed {
        return Err(CompressionError::CalibrationMismatch { needed, available: request.calibration.len() });
    }
    backend.compress(request)
}
