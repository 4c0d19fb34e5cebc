//! Compression recipes and calibration-data handling.

pub mod compress;
pub mod sampling;

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::ValidationError;

pub use compress::{
    run_compression, Artifact, ArtifactManifest, CompressionBackend, CompressionError, CompressionRequest,
    FailureInjection, MockCompressionBackend,
};
pub use sampling::{derive_distinct_subsets, sample_calibration, MeanTokenId, Sampler, TokenStatistic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scheme {
    Fp8Dynamic,
    IntW8a8,
    IntW4a16,
}

impl Scheme {
    pub fn needs_calibration(self) -> bool {
        !matches!(self, Scheme::Fp8Dynamic)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SamplingStrategy {
    #[default]
    Uniform,
    LengthWeighted,
    TokenStratified,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipe {
    pub name: String,
    pub scheme: Scheme,
    pub calibration_samples: usize,
    #[serde(default)]
    pub layer_exclusions: Vec<String>,
    #[serde(default)]
    pub sampling_strategy: SamplingStrategy,
}

impl Recipe {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.name.is_empty() {
            return Err(ValidationError::new("name", "empty"));
        }
        match (self.scheme.needs_calibration(), self.calibration_samples) {
            (false, n) if n > 0 => Err(ValidationError::new("calibration_samples", "FP8_DYNAMIC takes no calibration data")),
            (true, 0) => Err(ValidationError::new("calibration_samples", "integer schemes need calibration data")),
            _ => Ok(()),
        }
    }

    fn builtin(name: &str, scheme: Scheme, samples: usize) -> Self {
        Self {
            name: name.to_string(),
            scheme,
            calibration_samples: samples,
            layer_exclusions: vec!["lm_head".to_string()],
            sampling_strategy: SamplingStrategy::Uniform,
        }
    }
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("unknown recipe {0:?}")]
    UnknownRecipe(String),
    #[error("invalid recipe: {0}")]
    InvalidRecipe(#[from] ValidationError),
    #[error("corpus has {available} sequences but {needed} are required")]
    CorpusTooSmall { needed: usize, available: usize },
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),
    #[error("could not derive a distinct calibration subset for trial {trial}")]
    SubsetCollision { trial: usize },
    #[error("corpus I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Named recipes. Starts with the built-ins; job files may register more.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecipeRegistry {
    recipes: BTreeMap<String, Recipe>,
}

impl Default for RecipeRegistry {
    fn default() -> Self {
        let mut recipes = BTreeMap::new();
        for r in [
            Recipe::builtin("int_w8a8", Scheme::IntW8a8, 256),
            Recipe::builtin("int_w4a16", Scheme::IntW4a16, 512),
            Recipe::builtin("fp8_dynamic", Scheme::Fp8Dynamic, 0),
        ] {
            recipes.insert(r.name.clone(), r);
        }
        Self { recipes }
    }
}

impl RecipeRegistry {
    pub fn register(&mut self, recipe: Recipe) -> Result<(), CalibrationError> {
        recipe.validate()?;
        self.recipes.insert(recipe.name.clone(), recipe);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Recipe, CalibrationError> {
        self.recipes.get(name).ok_or_else(|| CalibrationError::UnknownRecipe(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.recipes.keys().map(String::as_str)
    }
}

/// Looks up a built-in recipe.
pub fn get_recipe(name: &str) -> Result<Recipe, CalibrationError> {
    RecipeRegistry::default().get(name).cloned()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCorpus {
    pub sequences: Vec<Vec<u32>>,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CorpusLine {
    Bare(Vec<u32>),
    Tagged { tokens: Vec<u32> },
}

impl TokenCorpus {
    pub fn new(sequences: Vec<Vec<u32>>) -> Result<Self, CalibrationError> {
        let corpus = Self { sequences, provenance: BTreeMap::new() };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn with_provenance(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.provenance.insert(key.into(), value.into());
        self
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        match self.sequences.iter().position(Vec::is_empty) {
            Some(i) => Err(CalibrationError::InvalidCorpus(format!("sequence {i} is empty"))),
            None => Ok(()),
        }
    }

    /// One token-ID array per line, either bare (`[1, 2, 3]`) or as
    /// `{"tokens": [...]}`. Blank lines are skipped.
    pub fn from_jsonl(path: &Path) -> Result<Self, CalibrationError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut sequences = Vec::new();
        for (n, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CorpusLine = serde_json::from_str(&line)
                .map_err(|e| CalibrationError::InvalidCorpus(format!("line {}: {e}", n + 1)))?;
            sequences.push(match parsed {
                CorpusLine::Bare(t) | CorpusLine::Tagged { tokens: t } => t,
            });
        }
        Ok(Self::new(sequences)?.with_provenance("source", path.display().to_string()))
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Hex digest of the multiset of sequences; independent of order.
    pub fn fingerprint(&self) -> String {
        let mut hashes: Vec<[u8; 32]> = self.sequences.iter().map(|s| content_hash(s)).collect();
        hashes.sort_unstable();
        let mut h = Sha256::new();
        for x in &hashes {
            h.update(x);
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn content_hash(tokens: &[u32]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((tokens.len() as u64).to_le_bytes());
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_recipes() {
        assert_eq!(get_recipe("int_w8a8").unwrap().calibration_samples, 256);
        assert_eq!(get_recipe("int_w4a16").unwrap().calibration_samples, 512);
        assert_eq!(get_recipe("fp8_dynamic").unwrap().calibration_samples, 0);
        assert!(matches!(get_recipe("int_w2"), Err(CalibrationError::UnknownRecipe(_))));
        for name in RecipeRegistry::default().names() {
            get_recipe(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn recipe_invariants() {
        let mut r = get_recipe("fp8_dynamic").unwrap();
        r.calibration_samples = 4;
        assert!(r.validate().is_err());
        let mut r = get_recipe("int_w8a8").unwrap();
        r.calibration_samples = 0;
        assert!(RecipeRegistry::default().register(r).is_err());
    }

    #[test]
    fn corpus_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "[1, 2, 3]\n\n{\"tokens\": [4, 5]}\n").unwrap();
        let c = TokenCorpus::from_jsonl(&path).unwrap();
        assert_eq!(c.sequences, vec![vec![1, 2, 3], vec![4, 5]]);
        std::fs::write(&path, "[1]\n[]\n").unwrap();
        assert!(TokenCorpus::from_jsonl(&path).is_err());
    }

    #[test]
    fn fingerprint_ignores_order() {
        let a = TokenCorpus::new(vec![vec![1, 2], vec![3]]).unwrap();
        let b = TokenCorpus::new(vec![vec![3], vec![1, 2]]).unwrap();
        let c = TokenCorpus::new(vec![vec![1], vec![2, 3]]).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
