//! SLO constraints, nearest-rank percentiles and per-trial compliance checks.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{RequestRecord, ValidationError};

pub const ACCEPTED_PERCENTILES: [u8; 4] = [50, 90, 95, 99];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MetricKind {
    E2eLatency,
    Ttft,
    Tpot,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::E2eLatency, MetricKind::Ttft, MetricKind::Tpot];

    /// Per-record sample in seconds, if the metric is defined for it.
    fn sample(self, record: &RequestRecord) -> Option<f64> {
        match self {
            MetricKind::E2eLatency => record.e2e(),
            MetricKind::Ttft => record.ttft(),
            MetricKind::Tpot => record.tpot(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::E2eLatency => "e2e_latency",
            MetricKind::Ttft => "ttft",
            MetricKind::Tpot => "tpot",
        }
    }
}

/// A metric at a given percentile, e.g. TTFT p50.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SloMetric {
    pub kind: MetricKind,
    pub percentile: u8,
}

impl SloMetric {
    pub fn new(kind: MetricKind, percentile: u8) -> Self {
        Self { kind, percentile }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if ACCEPTED_PERCENTILES.contains(&self.percentile) {
            Ok(())
        } else {
            Err(ValidationError::new(
                "percentile",
                format!("{} not in {{50, 90, 95, 99}}", self.percentile),
            ))
        }
    }
}

impl fmt::Display for SloMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_p{}", self.kind.name(), self.percentile)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloConstraint {
    pub metric: SloMetric,
    pub threshold_ms: f64,
    /// Multiplicative slack: passes when observed <= threshold * (1 + margin).
    #[serde(default)]
    pub margin: f64,
}

impl SloConstraint {
    pub fn new(kind: MetricKind, percentile: u8, threshold_ms: f64) -> Self {
        Self {
            metric: SloMetric::new(kind, percentile),
            threshold_ms,
            margin: 0.0,
        }
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn limit_ms(&self) -> f64 {
        self.threshold_ms * (1.0 + self.margin)
    }

    pub fn admits(&self, observed_ms: f64) -> bool {
        observed_ms <= self.limit_ms()
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        self.metric.validate()?;
        if !(self.threshold_ms.is_finite() && self.threshold_ms > 0.0) {
            return Err(ValidationError::new("threshold_ms", "must be positive"));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(ValidationError::new("margin", "must be a non-negative fraction"));
        }
        Ok(())
    }
}

/// A set of constraints; empty means throughput-oriented.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SloSpec {
    pub constraints: Vec<SloConstraint>,
}

impl SloSpec {
    pub fn throughput_oriented() -> Self {
        Self::default()
    }

    pub fn new(constraints: Vec<SloConstraint>) -> Self {
        Self { constraints }
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        self.constraints.iter().try_for_each(SloConstraint::validate)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("no successful requests to compute {0} from")]
    EmptyTelemetry(String),
}

/// Nearest-rank percentile of `metric` over OK records, in milliseconds.
pub fn percentile_stats(records: &[RequestRecord], metric: SloMetric) -> Result<f64, StatsError> {
    let mut samples: Vec<f64> = records.iter().filter_map(|r| metric.kind.sample(r)).collect();
    if samples.is_empty() {
        return Err(StatsError::EmptyTelemetry(metric.to_string()));
    }
    samples.sort_by(f64::total_cmp);
    Ok(nearest_rank(&samples, f64::from(metric.percentile)) * 1000.0)
}

/// `sorted[ceil(p/100 * n) - 1]`, clamped to the valid index range.
pub fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    let n = sorted.len();
    let rank = (percentile / 100.0 * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Percentile table for one metric (milliseconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileRow {
    pub p50: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
    pub mean: f64,
    pub count: usize,
}

/// Per-metric percentile table; metrics with no samples are absent.
pub type LatencyStats = BTreeMap<MetricKind, PercentileRow>;

pub fn latency_stats(records: &[RequestRecord]) -> LatencyStats {
    let mut table = BTreeMap::new();
    for kind in MetricKind::ALL {
        let mut samples: Vec<f64> = records.iter().filter_map(|r| kind.sample(r)).collect();
        if samples.is_empty() {
            continue;
        }
        samples.sort_by(f64::total_cmp);
        let ms = |p: f64| nearest_rank(&samples, p) * 1000.0;
        let mean = samples.iter().sum::<f64>() / samples.len() as f64 * 1000.0;
        table.insert(
            kind,
            PercentileRow {
                p50: ms(50.0),
                p90: ms(90.0),
                p95: ms(95.0),
                p99: ms(99.0),
                mean,
                count: samples.len(),
            },
        );
    }
    table
}

/// Outcome of one constraint against a trial's telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintOutcome {
    pub metric: String,
    pub threshold_ms: f64,
    pub limit_ms: f64,
    pub observed_ms: Option<f64>,
    pub pass: bool,
}

/// Checks every constraint. A constraint with no OK samples fails, except
/// TPOT over single-token outputs, which is vacuously satisfied.
pub fn evaluate_slos(slos: &SloSpec, records: &[RequestRecord]) -> Vec<ConstraintOutcome> {
    let any_ok = records.iter().any(RequestRecord::is_ok);
    slos.constraints
        .iter()
        .map(|c| {
            let observed = percentile_stats(records, c.metric).ok();
            let pass = match observed {
                Some(v) => c.admits(v),
                None => any_ok && c.metric.kind == MetricKind::Tpot,
            };
            ConstraintOutcome {
                metric: c.metric.to_string(),
                threshold_ms: c.threshold_ms,
                limit_ms: c.limit_ms(),
                observed_ms: observed,
                pass,
            }
        })
        .collect()
}
