use serde::{Deserialize, Serialize};

use crate::model::{compute_max_context, LoadPattern, RuntimeConfig, ValidationError, TENSOR_PARALLEL_CHOICES};

/// Inclusive integer interval searched on a log2 grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub min: u32,
    pub max: u32,
}

impl IntRange {
    pub fn new(min: u32, max: u32) -> Self {
        Self { min, max }
    }

    /// `min, 2*min, 4*min, ...` below `max`, then `max` itself.
    pub fn log2_grid(&self) -> Vec<u32> {
        let mut grid = Vec::new();
        let mut v = self.min;
        while v < self.max {
            grid.push(v);
            v = v.saturating_mul(2);
        }
        grid.push(self.max);
        grid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub tensor_parallel_choices: Vec<u32>,
    #[serde(default = "default_dp")]
    pub data_parallel_choices: Vec<u32>,
    pub max_num_seqs_range: IntRange,
    pub max_batched_tokens_range: IntRange,
    pub max_context: u32,
}

fn default_dp() -> Vec<u32> {
    vec![1]
}

impl SearchSpace {
    /// Default ranges for `pattern`, with parallelism bounded by `max_gpus`.
    pub fn for_pattern(pattern: &LoadPattern, max_gpus: u32) -> Self {
        Self {
            tensor_parallel_choices: TENSOR_PARALLEL_CHOICES.into_iter().filter(|tp| *tp <= max_gpus).collect(),
            data_parallel_choices: default_dp(),
            max_num_seqs_range: IntRange::new(16, 1024),
            max_batched_tokens_range: IntRange::new(512.max(pattern.input_len), 32768.max(pattern.input_len)),
            max_context: compute_max_context(pattern),
        }
    }

    pub fn validate(&self, pattern: &LoadPattern, max_gpus: Option<u32>) -> Result<(), ValidationError> {
        if self.tensor_parallel_choices.is_empty() {
            return Err(ValidationError::new("tensor_parallel_choices", "empty"));
        }
        if let Some(tp) = self.tensor_parallel_choices.iter().find(|tp| !TENSOR_PARALLEL_CHOICES.contains(tp)) {
            return Err(ValidationError::new("tensor_parallel_choices", format!("{tp} not in {{1, 2, 4, 8}}")));
        }
        if self.data_parallel_choices.is_empty() || self.data_parallel_choices.contains(&0) {
            return Err(ValidationError::new("data_parallel_choices", "must be non-empty and positive"));
        }
        for (name, r) in [("max_num_seqs_range", self.max_num_seqs_range), ("max_batched_tokens_range", self.max_batched_tokens_range)] {
            if r.min < 1 || r.min > r.max {
                return Err(ValidationError::new(name, format!("empty range [{}, {}]", r.min, r.max)));
            }
        }
        if self.max_batched_tokens_range.min < pattern.input_len {
            return Err(ValidationError::new("max_batched_tokens_range", "minimum below input_len"));
        }
        if u64::from(self.max_context) < pattern.total_tokens() {
            return Err(ValidationError::new("max_context", "below input_len + output_len"));
        }
        if let Some(gpus) = max_gpus {
            let widest = self.tensor_parallel_choices.iter().max().copied().unwrap_or(1)
                * self.data_parallel_choices.iter().max().copied().unwrap_or(1);
            if widest > gpus {
                return Err(ValidationError::new(
                    "tensor_parallel_choices",
                    format!("{widest} GPUs exceed the {gpus} available"),
                ));
            }
        }
        Ok(())
    }

    /// Dimensions in a fixed order: tp, dp, max_num_seqs, max_batched_tokens.
    pub fn dimensions(&self) -> [Dimension; 4] {
        [
            Dimension { name: "tensor_parallel", kind: DimensionKind::Categorical, values: self.tensor_parallel_choices.clone() },
            Dimension { name: "data_parallel", kind: DimensionKind::Categorical, values: self.data_parallel_choices.clone() },
            Dimension { name: "max_num_seqs", kind: DimensionKind::Ordinal, values: self.max_num_seqs_range.log2_grid() },
            Dimension { name: "max_batched_tokens", kind: DimensionKind::Ordinal, values: self.max_batched_tokens_range.log2_grid() },
        ]
    }

    pub fn config_at(&self, dims: &[Dimension; 4], index: [usize; 4]) -> RuntimeConfig {
        RuntimeConfig {
            tensor_parallel: dims[0].values[index[0]],
            data_parallel: dims[1].values[index[1]],
            max_num_seqs: dims[2].values[index[2]],
            max_batched_tokens: dims[3].values[index[3]],
            max_context: self.max_context,
        }
    }

    /// Grid position of `config`, snapping each coordinate to the nearest value.
    pub fn index_of(dims: &[Dimension; 4], config: &RuntimeConfig) -> [usize; 4] {
        let coords = [config.tensor_parallel, config.data_parallel, config.max_num_seqs, config.max_batched_tokens];
        std::array::from_fn(|d| dims[d].nearest(coords[d]))
    }

    /// Every configuration on the grid.
    pub fn enumerate(&self) -> Vec<RuntimeConfig> {
        let dims = self.dimensions();
        let mut out = Vec::new();
        for a in 0..dims[0].values.len() {
            for b in 0..dims[1].values.len() {
                for c in 0..dims[2].values.len() {
                    for d in 0..dims[3].values.len() {
                        out.push(self.config_at(&dims, [a, b, c, d]));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimensionKind {
    Categorical,
    /// Ordered grid; densities smooth across neighbouring indices.
    Ordinal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dimension {
    pub name: &'static str,
    pub kind: DimensionKind,
    pub values: Vec<u32>,
}

impl Dimension {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn nearest(&self, v: u32) -> usize {
        self.values
            .iter()
            .enumerate()
            .min_by_key(|(_, x)| x.abs_diff(v))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}
