//! Calibration subset selection.
//!
//! Sequences are first put in a canonical order by content hash, so a draw
//! depends only on the corpus contents, the strategy and the seed.

use std::collections::HashSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{content_hash, CalibrationError, Recipe, SamplingStrategy, TokenCorpus};

/// Per-sequence statistic used to form strata.
pub trait TokenStatistic: Send + Sync {
    fn value(&self, tokens: &[u32]) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MeanTokenId;

impl TokenStatistic for MeanTokenId {
    fn value(&self, tokens: &[u32]) -> f64 {
        tokens.iter().map(|&t| f64::from(t)).sum::<f64>() / tokens.len().max(1) as f64
    }
}

pub struct Sampler {
    pub strategy: SamplingStrategy,
    pub strata: usize,
    pub statistic: Box<dyn TokenStatistic>,
}

impl Sampler {
    pub fn new(strategy: SamplingStrategy) -> Self {
        Self { strategy, strata: 4, statistic: Box::new(MeanTokenId) }
    }

    pub fn with_strata(mut self, k: usize) -> Self {
        self.strata = k.max(1);
        self
    }

    pub fn with_statistic(mut self, statistic: impl TokenStatistic + 'static) -> Self {
        self.statistic = Box::new(statistic);
        self
    }

    /// Draws `n` sequences without replacement.
    pub fn sample(&self, corpus: &TokenCorpus, n: usize, seed: u64) -> Result<TokenCorpus, CalibrationError> {
        corpus.validate()?;
        if n > corpus.len() {
            return Err(CalibrationError::CorpusTooSmall { needed: n, available: corpus.len() });
        }
        let canonical = canonical_order(corpus);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<usize> = match self.strategy {
            SamplingStrategy::Uniform => index::sample(&mut rng, canonical.len(), n).into_iter().map(|i| canonical[i]).collect(),
            SamplingStrategy::LengthWeighted => {
                let lengths: Vec<f64> = canonical.iter().map(|&i| corpus.sequences[i].len() as f64).collect();
                index::sample_weighted(&mut rng, canonical.len(), |i| lengths[i], n)
                    .map_err(|e| CalibrationError::InvalidCorpus(e.to_string()))?
                    .into_iter()
                    .map(|i| canonical[i])
                    .collect()
            }
            SamplingStrategy::TokenStratified => {
                let strata = self.stratify(corpus, &canonical);
                let sizes: Vec<usize> = strata.iter().map(Vec::len).collect();
                let quotas = allocate(&sizes, n);
                let mut out = Vec::with_capacity(n);
                for (stratum, quota) in strata.iter().zip(quotas) {
                    out.extend(index::sample(&mut rng, stratum.len(), quota).into_iter().map(|i| stratum[i]));
                }
                out
            }
        };
        let mut subset = TokenCorpus {
            sequences: picks.into_iter().map(|i| corpus.sequences[i].clone()).collect(),
            provenance: corpus.provenance.clone(),
        };
        subset.provenance.insert("sampling_seed".into(), seed.to_string());
        Ok(subset)
    }

    /// Quantile strata of corpus indices, ordered by the statistic.
    pub fn stratify(&self, corpus: &TokenCorpus, canonical: &[usize]) -> Vec<Vec<usize>> {
        let mut keyed: Vec<(f64, usize)> = canonical
            .iter()
            .enumerate()
            .map(|(pos, &i)| (self.statistic.value(&corpus.sequences[i]), pos))
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let total = keyed.len();
        let k = self.strata.min(total).max(1);
        (0..k)
            .map(|j| keyed[j * total / k..(j + 1) * total / k].iter().map(|&(_, pos)| canonical[pos]).collect())
            .collect()
    }
}

/// Corpus indices sorted by content hash (ties keep corpus order).
fn canonical_order(corpus: &TokenCorpus) -> Vec<usize> {
    let hashes: Vec<[u8; 32]> = corpus.sequences.iter().map(|s| content_hash(s)).collect();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| hashes[a].cmp(&hashes[b]));
    order
}

/// Largest-remainder proportional allocation of `n` draws over strata.
pub fn allocate(sizes: &[usize], n: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let mut quotas: Vec<usize> = sizes.iter().map(|&s| s * n / total).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // remainder of s*n/total, compared exactly as s*n mod total
    order.sort_by(|&a, &b| ((sizes[b] * n) % total).cmp(&((sizes[a] * n) % total)).then(a.cmp(&b)));
    let mut left = n - quotas.iter().sum::<usize>();
    while left > 0 {
        let before = left;
        for &j in &order {
            if left > 0 && quotas[j] < sizes[j] {
                quotas[j] += 1;
                left -= 1;
            }
        }
        if left == before {
            break;
        }
    }
    quotas
}

/// Draws according to the recipe's strategy and sample count.
pub fn sample_calibration(corpus: &TokenCorpus, recipe: &Recipe, seed: u64) -> Result<TokenCorpus, CalibrationError> {
    Sampler::new(recipe.sampling_strategy).sample(corpus, recipe.calibration_samples, seed)
}

/// Seed for `trial` derived from `base`; `attempt` moves past collisions.
pub fn derive_seed(base: u64, trial: usize, attempt: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update((trial as u64).to_le_bytes());
    h.update(attempt.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

const MAX_ATTEMPTS: u32 = 64;

/// One calibration subset per trial, pairwise distinct as sets.
///
/// When every subset is necessarily the same (no samples, or the whole
/// corpus) distinctness cannot hold and is not enforced.
pub fn derive_distinct_subsets(
    corpus: &TokenCorpus,
    recipe: &Recipe,
    base_seed: u64,
    trials: usize,
) -> Result<Vec<(u64, TokenCorpus)>, CalibrationError> {
    let sampler = Sampler::new(recipe.sampling_strategy);
    let n = recipe.calibration_samples;
    let enforce = n > 0 && n < corpus.len();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut attempt = 0;
        loop {
            let seed = derive_seed(base_seed, trial, attempt);
            let subset = sampler.sample(corpus, n, seed)?;
            if !enforce || seen.insert(subset.fingerprint()) {
                out.push((seed, subset));
                break;
            }
            attempt += 1;
            if attempt >= MAX_ATTEMPTS {
                return Err(CalibrationError::SubsetCollision { trial });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{get_recipe, Scheme};
    use proptest::prelude::*;

    fn corpus(n: usize) -> TokenCorpus {
        TokenCorpus::new((0..n).map(|i| vec![i as u32; 1 + i % 7]).collect()).unwrap()
    }

    fn recipe(strategy: SamplingStrategy, n: usize) -> Recipe {
        Recipe { name: "t".into(), scheme: Scheme::IntW8a8, calibration_samples: n, layer_exclusions: vec![], sampling_strategy: strategy }
    }

    #[test]
    fn exhaustive_uniform_draw_is_a_permutation() {
        let c = corpus(20);
        let s = sample_calibration(&c, &recipe(SamplingStrategy::Uniform, 20), 5).unwrap();
        assert_eq!(s.fingerprint(), c.fingerprint());
    }

    #[test]
    fn too_small() {
        let c = corpus(100);
        assert!(matches!(
            sample_calibration(&c, &get_recipe("int_w8a8").unwrap(), 0),
            Err(CalibrationError::CorpusTooSmall { needed: 256, available: 100 })
        ));
    }

    #[test]
    fn fp8_takes_nothing() {
        let s = sample_calibration(&corpus(3), &get_recipe("fp8_dynamic").unwrap(), 9).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn equal_strata_get_equal_shares() {
        // 16 sequences with distinct mean token IDs: 4 equal strata of 4
        let c = TokenCorpus::new((0..16).map(|i| vec![i * 10, i * 10 + 1]).collect()).unwrap();
        let sampler = Sampler::new(SamplingStrategy::TokenStratified);
        for seed in 0..50 {
            let s = sampler.sample(&c, 8, seed).unwrap();
            let mut per = [0; 4];
            for seq in &s.sequences {
                per[(seq[0] / 10 / 4) as usize] += 1;
            }
            assert_eq!(per, [2, 2, 2, 2]);
        }
    }

    #[test]
    fn allocation_is_proportional() {
        assert_eq!(allocate(&[4, 4, 4, 4], 8), vec![2, 2, 2, 2]);
        // floors 1, 1, 1, 2; the two spare draws go to the 14/21 remainders
        assert_eq!(allocate(&[5, 5, 5, 6], 7), vec![2, 2, 1, 2]);
        assert_eq!(allocate(&[3, 0, 1], 4), vec![3, 0, 1]);
    }

    #[test]
    fn custom_statistic() {
        struct Length;
        impl TokenStatistic for Length {
            fn value(&self, tokens: &[u32]) -> f64 {
                tokens.len() as f64
            }
        }
        let c = TokenCorpus::new((1..=8).map(|n| vec![7; n]).collect()).unwrap();
        let sampler = Sampler::new(SamplingStrategy::TokenStratified).with_strata(2).with_statistic(Length);
        let s = sampler.sample(&c, 2, 1).unwrap();
        let short = s.sequences.iter().filter(|q| q.len() <= 4).count();
        assert_eq!(short, 1);
    }

    #[test]
    fn distinct_subsets() {
        let c = corpus(30);
        let subsets = derive_distinct_subsets(&c, &recipe(SamplingStrategy::Uniform, 5), 42, 10).unwrap();
        let prints: HashSet<_> = subsets.iter().map(|(_, s)| s.fingerprint()).collect();
        assert_eq!(prints.len(), 10);
        // only C(3, 2) = 3 distinct pairs exist
        assert!(matches!(
            derive_distinct_subsets(&corpus(3), &recipe(SamplingStrategy::Uniform, 2), 1, 4),
            Err(CalibrationError::SubsetCollision { trial: 3 })
        ));
    }

    proptest! {
        #[test]
        fn stable_under_reordering(seed in any::<u64>(), rot in 0usize..20, strategy in 0usize..3) {
            let strategy = [SamplingStrategy::Uniform, SamplingStrategy::LengthWeighted, SamplingStrategy::TokenStratified][strategy];
            let c = corpus(20);
            let mut shuffled = c.clone();
            shuffled.sequences.rotate_left(rot);
            let sampler = Sampler::new(strategy);
            let a = sampler.sample(&c, 6, seed).unwrap();
            let b = sampler.sample(&shuffled, 6, seed).unwrap();
            prop_assert_eq!(a.sequences, b.sequences);
        }

        #[test]
        fn allocation_sums_and_caps(sizes in proptest::collection::vec(0usize..50, 1..8), frac in 0.0f64..=1.0) {
            let total: usize = sizes.iter().sum();
            let n = (total as f64 * frac) as usize;
            let q = allocate(&sizes, n);
            prop_assert_eq!(q.iter().sum::<usize>(), n);
            for (qi, si) in q.iter().zip(&sizes) {
                prop_assert!(qi <= si);
                let exact = (*si * n) as f64 / total.max(1) as f64;
                prop_assert!((*qi as f64 - exact).abs() < 1.0);
            }
        }
    }
}
