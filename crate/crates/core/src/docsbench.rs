//! Acceptance ledger and stage benchmark records.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid record: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerEntry {
    pub id: u32,
    pub description: String,
    pub status: Status,
    pub measured: String,
    pub tolerance: String,
}

impl LedgerEntry {
    pub fn new(
        id: u32,
        description: impl Into<String>,
        pass: bool,
        measured: impl Into<String>,
        tolerance: impl Into<String>,
    ) -> Self {
        Self {
            id,
            description: description.into(),
            status: if pass { Status::Pass } else { Status::Fail },
            measured: measured.into(),
            tolerance: tolerance.into(),
        }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    /// One human-readable summary line.
    pub fn line(&self) -> String {
        let tag = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
        };
        format!(
            "[{tag}] criterion {:>2}: {} | measured {} | tolerance {}",
            self.id, self.description, self.measured, self.tolerance
        )
    }
}

/// Pass/fail ledger keyed by criterion id, kept in id order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ledger {
    pub entries: Vec<LedgerEntry>,
}

impl Ledger {
    /// Adds an entry, replacing any earlier one with the same id.
    pub fn record(&mut self, entry: LedgerEntry) {
        self.entries.retain(|e| e.id != entry.id);
        self.entries.push(entry);
        self.entries.sort_by_key(|e| e.id);
    }

    pub fn get(&self, id: u32) -> Option<&LedgerEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(LedgerEntry::passed)
    }

    /// Checks that the ids are exactly `1..=count`, each once.
    pub fn validate(&self, count: u32) -> Result<(), BenchError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.id) {
                return Err(BenchError::Invalid(format!("criterion {} appears twice", e.id)));
            }
        }
        let want: BTreeSet<u32> = (1..=count).collect();
        if seen != want {
            let missing: Vec<_> = want.difference(&seen).collect();
            let extra: Vec<_> = seen.difference(&want).collect();
            return Err(BenchError::Invalid(format!("missing ids {missing:?}, unexpected ids {extra:?}")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ledger serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Determinism entry: passes only when a rerun reproduced the reference
/// bytes exactly. A rerun that could not complete counts as a failure.
pub fn determinism_entry(
    id: u32,
    description: &str,
    reference: &[u8],
    rerun: Result<Vec<u8>, String>,
) -> LedgerEntry {
    let tol = "byte-identical";
    match rerun {
        Ok(bytes) if bytes == reference => LedgerEntry::new(id, description, true, "identical", tol),
        Ok(bytes) => {
            let first = reference
                .iter()
                .zip(&bytes)
                .position(|(a, b)| a != b)
                .unwrap_or(reference.len().min(bytes.len()));
            LedgerEntry::new(id, description, false, format!("differs at byte {first}"), tol)
        }
        Err(msg) => LedgerEntry::new(id, description, false, format!("rerun failed: {msg}"), tol),
    }
}

/// Stages of the command-line pipeline, in execution order.
pub const STAGES: [&str; 7] = ["gen", "flow", "magnify", "train", "eval", "ablate", "saliency"];

/// Timing of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchRecord {
    pub stage: String,
    /// Pixels processed: samples times frame area.
    pub input_size: u64,
    pub wall_time_s: f64,
    /// Resident-set high-water mark of the process, 0 when unavailable.
    pub peak_memory_bytes: u64,
}

impl BenchRecord {
    pub fn validate(&self) -> Result<(), BenchError> {
        if !STAGES.contains(&self.stage.as_str()) {
            return Err(BenchError::Invalid(format!("unknown stage {}", self.stage)));
        }
        if !(self.wall_time_s >= 0.0) || !self.wall_time_s.is_finite() {
            return Err(BenchError::Invalid(format!("{}: bad wall time {}", self.stage, self.wall_time_s)));
        }
        Ok(())
    }
}

/// Peak resident memory of this process, read from procfs where available.
pub fn peak_memory_estimate() -> u64 {
    let Ok(status) = std::fs::read_to_string("/proc/self/status") else {
        return 0;
    };
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse::<u64>().ok())
        .map_or(0, |kb| kb * 1024)
}

pub fn load_bench(path: impl AsRef<Path>) -> Result<Vec<BenchRecord>, BenchError> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let recs: Vec<BenchRecord> = serde_json::from_str(&text)?;
    recs.iter().try_for_each(BenchRecord::validate)?;
    Ok(recs)
}

/// Inserts or replaces the record of a stage and rewrites the file in
/// pipeline order.
pub fn upsert_bench(path: impl AsRef<Path>, rec: BenchRecord) -> Result<Vec<BenchRecord>, BenchError> {
    rec.validate()?;
    let path = path.as_ref();
    let mut recs = load_bench(path)?;
    recs.retain(|r| r.stage != rec.stage);
    recs.push(rec);
    recs.sort_by_key(|r| STAGES.iter().position(|s| *s == r.stage));
    std::fs::write(path, serde_json::to_string_pretty(&recs)?).map_err(|e| BenchError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(recs)
}

/// Stages with no record yet.
pub fn missing_stages(recs: &[BenchRecord]) -> Vec<&'static str> {
    STAGES
        .iter()
        .copied()
        .filter(|s| !recs.iter().any(|r| r.stage == *s))
        .collect()
}
