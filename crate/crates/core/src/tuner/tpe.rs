//! Tree-structured Parzen Estimator over the runtime-configuration grid.
//!
//! Observations are split at the `gamma` quantile of fitness into a good set
//! and a bad set. Each dimension gets an independent density per set:
//! add-one-smoothed counts for categorical dimensions and a discretised
//! Gaussian kernel mixture (plus a uniform prior component) for ordinal ones.
//! Candidates are drawn from the good densities and the one maximising
//! `l(x) / g(x)` wins, optionally preferring configurations not yet
//! evaluated.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::space::{Dimension, DimensionKind, SearchSpace};
use crate::model::RuntimeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpeSettings {
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::n_candidates")]
    pub n_candidates: usize,
    /// Uniform proposals before the model kicks in.
    #[serde(default = "defaults::n_startup")]
    pub n_startup: usize,
    /// Pseudo-count added to every category.
    #[serde(default = "defaults::smoothing")]
    pub smoothing: f64,
    /// Rank unevaluated candidates above evaluated ones. Repeats only help
    /// when measurements are noisy.
    #[serde(default = "defaults::avoid_repeats")]
    pub avoid_repeats: bool,
}

mod defaults {
    pub fn gamma() -> f64 {
        0.25
    }
    pub fn n_candidates() -> usize {
        24
    }
    pub fn n_startup() -> usize {
        5
    }
    pub fn smoothing() -> f64 {
        1.0
    }
    pub fn avoid_repeats() -> bool {
        true
    }
}

impl Default for TpeSettings {
    fn default() -> Self {
        Self {
            gamma: defaults::gamma(),
            n_candidates: defaults::n_candidates(),
            n_startup: defaults::n_startup(),
            smoothing: defaults::smoothing(),
            avoid_repeats: defaults::avoid_repeats(),
        }
    }
}

/// A probability mass function over the indices of one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Density {
    pub probs: Vec<f64>,
}

impl Density {
    pub fn uniform(k: usize) -> Self {
        Self { probs: vec![1.0 / k as f64; k] }
    }

    /// `(count_j + eps) / (n + k * eps)`.
    pub fn categorical(observations: &[usize], k: usize, smoothing: f64) -> Self {
        let mut counts = vec![smoothing; k];
        for &o in observations {
            counts[o] += 1.0;
        }
        let total = observations.len() as f64 + k as f64 * smoothing;
        Self { probs: counts.into_iter().map(|c| c / total).collect() }
    }

    /// Uniform prior (weight one) plus one truncated Gaussian kernel per
    /// observation, each normalised over the grid.
    pub fn ordinal(observations: &[usize], k: usize) -> Self {
        if k == 1 {
            return Self::uniform(1);
        }
        let n = observations.len() as f64;
        let bandwidth = ((k as f64 - 1.0) / (n + 1.0).sqrt() / 2.0).clamp(0.5, k as f64);
        let mut mass = vec![1.0 / k as f64; k];
        for &o in observations {
            let kernel: Vec<f64> = (0..k)
                .map(|j| {
                    let z = (j as f64 - o as f64) / bandwidth;
                    (-0.5 * z * z).exp()
                })
                .collect();
            let norm: f64 = kernel.iter().sum();
            for (m, w) in mass.iter_mut().zip(kernel) {
                *m += w / norm;
            }
        }
        let total = 1.0 + n;
        Self { probs: mass.into_iter().map(|m| m / total).collect() }
    }

    pub fn fit(dim: &Dimension, observations: &[usize], smoothing: f64) -> Self {
        match dim.kind {
            DimensionKind::Categorical => Self::categorical(observations, dim.len(), smoothing),
            DimensionKind::Ordinal => Self::ordinal(observations, dim.len()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }
}

/// Uniform draw from the grid.
pub fn uniform_propose<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> RuntimeConfig {
    let dims = space.dimensions();
    let index = std::array::from_fn(|d| rng.random_range(0..dims[d].len()));
    space.config_at(&dims, index)
}

/// Size of the good set for `n` observations.
pub fn good_count(n: usize, gamma: f64) -> usize {
    ((gamma * n as f64).ceil() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Proposes the next configuration given `(config, fitness)` history
/// (higher fitness is better).
pub fn tpe_propose<R: Rng + ?Sized>(
    history: &[(RuntimeConfig, f64)],
    space: &SearchSpace,
    settings: &TpeSettings,
    rng: &mut R,
) -> RuntimeConfig {
    let dims = space.dimensions();
    if dims.iter().all(|d| d.len() == 1) {
        return space.config_at(&dims, [0; 4]);
    }
    if history.len() < settings.n_startup.max(2) {
        return uniform_propose(space, rng);
    }

    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| history[b].1.total_cmp(&history[a].1).then(a.cmp(&b)));
    let n_good = good_count(history.len(), settings.gamma);
    let points: Vec<[usize; 4]> = order.iter().map(|&i| SearchSpace::index_of(&dims, &history[i].0)).collect();
    let (good, bad) = points.split_at(n_good);

    let densities: Vec<(Density, Density)> = (0..4)
        .map(|d| {
            let g: Vec<usize> = good.iter().map(|p| p[d]).collect();
            let b: Vec<usize> = bad.iter().map(|p| p[d]).collect();
            (Density::fit(&dims[d], &g, settings.smoothing), Density::fit(&dims[d], &b, settings.smoothing))
        })
        .collect();

    let seen: std::collections::HashSet<[usize; 4]> = points.iter().copied().collect();
    let mut best: Option<([usize; 4], (bool, f64))> = None;
    for _ in 0..settings.n_candidates.max(1) {
        let candidate: [usize; 4] = std::array::from_fn(|d| densities[d].0.sample(rng));
        let ratio: f64 = (0..4)
            .map(|d| densities[d].0.probs[candidate[d]].ln() - densities[d].1.probs[candidate[d]].ln())
            .sum();
        let key = (settings.avoid_repeats && !seen.contains(&candidate), ratio);
        if best.is_none_or(|(_, k)| (key.0 && !k.0) || (key.0 == k.0 && key.1 > k.1)) {
            best = Some((candidate, key));
        }
    }
    let (index, _) = best.expect("at least one candidate");
    space.config_at(&dims, index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LoadPattern;
    use crate::tuner::space::IntRange;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tp_only_space() -> SearchSpace {
        SearchSpace {
            tensor_parallel_choices: vec![1, 2, 4, 8],
            data_parallel_choices: vec![1],
            max_num_seqs_range: IntRange::new(64, 64),
            max_batched_tokens_range: IntRange::new(2048, 2048),
            max_context: 4096,
        }
    }

    fn cfg(tp: u32) -> RuntimeConfig {
        RuntimeConfig { tensor_parallel: tp, data_parallel: 1, max_num_seqs: 64, max_batched_tokens: 2048, max_context: 4096 }
    }

    #[test]
    fn categorical_ratio_closed_form() {
        // 8 observations, gamma 0.25 -> 2 good (tp=2), 6 bad (tp=8), smoothing 1, k = 4
        let good = Density::categorical(&[1, 1], 4, 1.0);
        let bad = Density::categorical(&[3, 3, 3, 3, 3, 3], 4, 1.0);
        let expect_good = [1.0 / 6.0, 3.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];
        let expect_bad = [0.1, 0.1, 0.1, 0.7];
        for j in 0..4 {
            assert!((good.probs[j] - expect_good[j]).abs() < 1e-12);
            assert!((bad.probs[j] - expect_bad[j]).abs() < 1e-12);
        }
        let ratio: Vec<f64> = (0..4).map(|j| good.probs[j] / bad.probs[j]).collect();
        assert!((ratio[1] - 5.0).abs() < 1e-12);
        assert!((ratio[0] - 5.0 / 3.0).abs() < 1e-12);
        assert!((ratio[3] - 5.0 / 21.0).abs() < 1e-12);
        assert_eq!(good_count(8, 0.25), 2);
    }

    #[test]
    fn proposal_prefers_good_category() {
        let space = tp_only_space();
        let mut history: Vec<(RuntimeConfig, f64)> = vec![(cfg(2), 10.0), (cfg(2), 9.0)];
        history.extend((0..6).map(|i| (cfg(8), i as f64)));
        // tp=2 has the highest ratio, so it wins whenever any of the 24
        // candidates (drawn from l, where P(tp=2) = 1/2) lands on it.
        let expected = 1.0 - 0.5f64.powi(24);
        let trials = 2000;
        let settings = TpeSettings { avoid_repeats: false, ..TpeSettings::default() };
        let hits = (0..trials)
            .filter(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(*s);
                tpe_propose(&history, &space, &settings, &mut rng).tensor_parallel == 2
            })
            .count();
        assert!(hits as f64 / trials as f64 >= expected - 0.001);
    }

    #[test]
    fn repeats_are_avoided_while_unseen_points_remain() {
        let space = tp_only_space();
        let mut history: Vec<(RuntimeConfig, f64)> = vec![(cfg(2), 10.0), (cfg(2), 9.0)];
        history.extend((0..6).map(|i| (cfg(8), i as f64)));
        for s in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            // P(no candidate lands on tp 1 or 4) = (2/3)^24, below 1e-4
            let tp = tpe_propose(&history, &space, &TpeSettings::default(), &mut rng).tensor_parallel;
            assert!(tp == 1 || tp == 4, "seed {s}: proposed seen tp {tp}");
        }
        history.extend([(cfg(1), 0.0), (cfg(4), 0.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = tpe_propose(&history, &space, &TpeSettings::default(), &mut rng);
        assert!(space.enumerate().contains(&c));
    }

    #[test]
    fn cold_start_is_uniform() {
        let p = LoadPattern::new(100, 10);
        let space = SearchSpace::for_pattern(&p, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..400 {
            let c = tpe_propose(&[], &space, &TpeSettings::default(), &mut rng);
            assert!(space.enumerate().contains(&c));
            seen.insert(c.tensor_parallel);
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn single_point_space() {
        let mut space = tp_only_space();
        space.tensor_parallel_choices = vec![4];
        let history: Vec<_> = (0..10).map(|i| (cfg(4), i as f64)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert_eq!(tpe_propose(&history, &space, &TpeSettings::default(), &mut rng), RuntimeConfig { tensor_parallel: 4, ..cfg(4) });
        }
    }

    #[test]
    fn ordinal_density_is_normalised_and_peaked() {
        let d = Density::ordinal(&[2, 2, 3], 7);
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let argmax = d.probs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert!(argmax == 2 || argmax == 3);
        assert!(d.probs.iter().all(|p| *p > 0.0));
    }
}
