//! JSON-lines archives: a versioned header record, then one record per line.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::pool::TrialStatus;
use crate::model::RuntimeConfig;
use crate::sweep::SweepResult;
use crate::tuner::TuneArchive;

pub const SCHEMA_VERSION: u32 = 1;
/// Directory archives are written to; defaults to `./archives`.
pub const ARCHIVE_DIR_ENV: &str = "SERVETUNE_ARCHIVE_DIR";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("archive line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("archive does not start with a header record")]
    MissingHeader,
    #[error("unsupported archive schema version {0}")]
    UnsupportedVersion(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FlowStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub workers: usize,
    /// Most slots the stage held at once.
    pub slots: usize,
    pub launched: usize,
    pub ok: usize,
    pub failed: usize,
    pub excluded: usize,
    /// Virtual makespan of the stage in seconds.
    pub virtual_seconds: f64,
    /// Ledger allocation once the stage's pool was destroyed.
    pub slots_in_use_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub stage: String,
    pub trial: usize,
    pub seed: u64,
    pub status: TrialStatus,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker: Option<usize>,
    pub virtual_start: f64,
    pub virtual_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedArtifact {
    pub trial: usize,
    pub seed: u64,
    pub artifact: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub status: FlowStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_star: Option<SelectedArtifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_star: Option<RuntimeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_star_fitness: Option<f64>,
    pub virtual_seconds: f64,
    /// Largest per-stage slot count.
    pub peak_slots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ArchiveRecord {
    Header {
        schema_version: u32,
        kind: String,
        name: String,
        seed: u64,
        spec: Value,
    },
    Stage(StageRecord),
    Trial(TrialRecord),
    /// A full sweep with per-request telemetry.
    Sweep {
        target: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        config: Option<RuntimeConfig>,
        sweep: SweepResult,
    },
    Tuning(TuneArchive),
    Result(FlowSummary),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub records: Vec<ArchiveRecord>,
}

impl Archive {
    pub fn new(kind: &str, name: &str, seed: u64, spec: Value) -> Self {
        Self {
            records: vec![ArchiveRecord::Header {
                schema_version: SCHEMA_VERSION,
                kind: kind.to_string(),
                name: name.to_string(),
                seed,
                spec,
            }],
        }
    }

    pub fn push(&mut self, record: ArchiveRecord) {
        self.records.push(record);
    }

    pub fn name(&self) -> &str {
        match &self.records[0] {
            ArchiveRecord::Header { name, .. } => name,
            _ => "archive",
        }
    }

    pub fn trials(&self) -> impl Iterator<Item = &TrialRecord> {
        self.records.iter().filter_map(|r| match r {
            ArchiveRecord::Trial(t) => Some(t),
            _ => None,
        })
    }

    pub fn stages(&self) -> impl Iterator<Item = &StageRecord> {
        self.records.iter().filter_map(|r| match r {
            ArchiveRecord::Stage(s) => Some(s),
            _ => None,
        })
    }

    pub fn sweeps(&self) -> impl Iterator<Item = (&str, &SweepResult)> {
        self.records.iter().filter_map(|r| match r {
            ArchiveRecord::Sweep { target, sweep, .. } => Some((target.as_str(), sweep)),
            _ => None,
        })
    }

    pub fn summary(&self) -> Option<&FlowSummary> {
        self.records.iter().rev().find_map(|r| match r {
            ArchiveRecord::Result(s) => Some(s),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("archive records serialise"));
            out.push('\n');
        }
        out
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self, ArchiveError> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ArchiveRecord =
                serde_json::from_str(&line).map_err(|source| ArchiveError::Parse { line: i + 1, source })?;
            records.push(record);
        }
        match records.first() {
            Some(ArchiveRecord::Header { schema_version, .. }) if *schema_version == SCHEMA_VERSION => Ok(Self { records }),
            Some(ArchiveRecord::Header { schema_version, .. }) => Err(ArchiveError::UnsupportedVersion(*schema_version)),
            _ => Err(ArchiveError::MissingHeader),
        }
    }

    pub fn read(path: &Path) -> Result<Self, ArchiveError> {
        Self::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Writes `<dir>/<name>.jsonl` and returns the path.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf, ArchiveError> {
        std::fs::create_dir_all(dir)?;
        let stem: String = self
            .name()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let path = dir.join(format!("{stem}.jsonl"));
        let mut file = std::fs::File::create(&path)?;
        file.write_all(self.to_jsonl().as_bytes())?;
        Ok(path)
    }
}

/// Archive directory from the environment, or `./archives`.
pub fn archive_dir() -> PathBuf {
    std::env::var_os(ARCHIVE_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("archives"))
}
