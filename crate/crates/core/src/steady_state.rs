//! Queueing steady-state diagnostics.
//!
//! Completion timestamps are regressed on arrival timestamps,
//! `c_i = alpha + beta * r_i`. When the server keeps pace with arrivals the
//! completions trail the arrivals by a roughly constant latency and the slope
//! is close to one. When arrivals outrun the server the backlog grows, each
//! completion lags further behind its arrival, and the slope exceeds one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::RequestRecord;

pub const DEFAULT_TOLERANCE: f64 = 0.05;
pub const MIN_RECORDS: usize = 10;
pub const TOLERANCE_RANGE: (f64, f64) = (0.005, 0.2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityDiagnostics {
    pub beta: f64,
    /// Seconds.
    pub alpha: f64,
    pub r2: f64,
    pub tolerance: f64,
    pub is_stable: bool,
}

impl StabilityDiagnostics {
    /// Pearson correlation recovered from R² and the slope sign.
    pub fn correlation(&self) -> f64 {
        self.r2.sqrt().copysign(self.beta)
    }

    pub fn fitted_completion(&self, arrival: f64) -> f64 {
        self.alpha + self.beta * arrival
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StabilityError {
    #[error("need at least {MIN_RECORDS} completed requests, got {0}")]
    InsufficientData(usize),
    #[error("all arrival timestamps are equal")]
    DegenerateRegressor,
    #[error("tolerance {0} outside [0.005, 0.2]")]
    InvalidTolerance(f64),
}

/// Ordinary least squares over `(x, y)` pairs; returns `(slope, intercept, r2)`.
pub fn ols(points: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let n = points.len() as f64;
    if points.is_empty() {
        return None;
    }
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r2 = if syy <= 0.0 {
        1.0
    } else {
        let ss_res: f64 = points
            .iter()
            .map(|&(x, y)| {
                let e = y - (intercept + slope * x);
                e * e
            })
            .sum();
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Some((slope, intercept, r2))
}

/// Fits completion on arrival over OK records and classifies the trial.
pub fn fit_stability(records: &[RequestRecord], tolerance: f64) -> Result<StabilityDiagnostics, StabilityError> {
    if !(TOLERANCE_RANGE.0..=TOLERANCE_RANGE.1).contains(&tolerance) {
        return Err(StabilityError::InvalidTolerance(tolerance));
    }
    let points: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.is_ok())
        .filter_map(|r| r.completion_ts.map(|c| (r.arrival_ts, c)))
        .collect();
    if points.len() < MIN_RECORDS {
        return Err(StabilityError::InsufficientData(points.len()));
    }
    let (beta, alpha, r2) = ols(&points).ok_or(StabilityError::DegenerateRegressor)?;
    Ok(StabilityDiagnostics {
        beta,
        alpha,
        r2,
        tolerance,
        is_stable: (beta - 1.0).abs() <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(pairs: impl IntoIterator<Item = (f64, f64)>) -> Vec<RequestRecord> {
        pairs
            .into_iter()
            .enumerate()
            .map(|(i, (r, c))| RequestRecord::ok(i as u64, r, r, c, 1))
            .collect()
    }

    #[test]
    fn constant_shift_is_stable() {
        let records = trace((0..50).map(|i| (i as f64 * 0.5, i as f64 * 0.5 + 0.3)));
        let d = fit_stability(&records, 0.05).unwrap();
        assert!((d.beta - 1.0).abs() < 1e-12);
        assert!((d.alpha - 0.3).abs() < 1e-12);
        assert!(d.is_stable);
        assert!((d.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn completions_at_half_the_arrival_rate_overload() {
        // arrivals every 0.5 s, completions every 1.0 s
        let records = trace((0..40).map(|i| (i as f64 * 0.5, i as f64 * 1.0)));
        let d = fit_stability(&records, 0.05).unwrap();
        assert!((d.beta - 2.0).abs() < 1e-12);
        assert!(!d.is_stable);
    }

    #[test]
    fn slope_within_tolerance() {
        let records = trace((0..40).map(|i| (i as f64, 1.04 * i as f64 + 0.2)));
        let d = fit_stability(&records, 0.05).unwrap();
        assert!((d.beta - 1.04).abs() < 1e-12);
        assert!(d.is_stable);
        assert!(!fit_stability(&records, 0.02).unwrap().is_stable);
    }

    #[test]
    fn error_paths() {
        let few = trace((0..9).map(|i| (i as f64, i as f64 + 1.0)));
        assert_eq!(fit_stability(&few, 0.05), Err(StabilityError::InsufficientData(9)));
        let flat = trace((0..20).map(|i| (3.0, 3.0 + i as f64)));
        assert_eq!(fit_stability(&flat, 0.05), Err(StabilityError::DegenerateRegressor));
        let ok = trace((0..20).map(|i| (i as f64, i as f64)));
        assert_eq!(fit_stability(&ok, 0.3), Err(StabilityError::InvalidTolerance(0.3)));
        assert_eq!(fit_stability(&ok, 0.001), Err(StabilityError::InvalidTolerance(0.001)));
    }

    #[test]
    fn failed_records_are_excluded() {
        let mut records = trace((0..20).map(|i| (i as f64, i as f64 + 0.5)));
        records.push(RequestRecord::failed(99, 100.0, crate::model::RequestStatus::Timeout));
        let d = fit_stability(&records, 0.05).unwrap();
        assert!((d.beta - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn exact_linear_traces_are_recovered(a in -5.0f64..5.0, b in 0.2f64..3.0, n in 10usize..300, step in 0.01f64..2.0) {
            let records = trace((0..n).map(|i| { let r = i as f64 * step; (r, a + b * r) }));
            let d = fit_stability(&records, 0.05).unwrap();
            prop_assert!((d.beta - b).abs() < 1e-9);
            prop_assert!((d.alpha - a).abs() < 1e-9);
            prop_assert!((d.r2 - 1.0).abs() < 1e-9);
        }

        #[test]
        fn shift_changes_only_alpha(shift in -100.0f64..100.0, jitter in prop::collection::vec(0.0f64..0.5, 10..80)) {
            let base: Vec<(f64, f64)> = jitter.iter().enumerate().map(|(i, j)| (i as f64 * 0.3, i as f64 * 0.33 + j)).collect();
            let d0 = fit_stability(&trace(base.clone()), 0.05).unwrap();
            let d1 = fit_stability(&trace(base.iter().map(|(r, c)| (r + shift, c + shift))), 0.05).unwrap();
            prop_assert!((d0.beta - d1.beta).abs() < 1e-7);
            prop_assert!((d0.r2 - d1.r2).abs() < 1e-7);
        }

        #[test]
        fn scaling_keeps_beta(k in 0.1f64..20.0, jitter in prop::collection::vec(0.0f64..0.5, 10..80)) {
            let base: Vec<(f64, f64)> = jitter.iter().enumerate().map(|(i, j)| (i as f64 * 0.3, i as f64 * 0.31 + j)).collect();
            let d0 = fit_stability(&trace(base.clone()), 0.05).unwrap();
            let d1 = fit_stability(&trace(base.iter().map(|(r, c)| (r * k, c * k))), 0.05).unwrap();
            prop_assert!((d0.beta - d1.beta).abs() < 1e-7 * d0.beta.abs().max(1.0));
        }

        #[test]
        fn stability_monotone_in_tolerance(b in 0.8f64..1.3, t1 in 0.005f64..0.2, t2 in 0.005f64..0.2) {
            let records = trace((0..30).map(|i| (i as f64, b * i as f64)));
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            if fit_stability(&records, lo).unwrap().is_stable {
                prop_assert!(fit_stability(&records, hi).unwrap().is_stable);
            }
        }
    }
}
