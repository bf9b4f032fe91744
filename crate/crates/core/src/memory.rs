//! Append-only incident memory and signature similarity.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::heal::{ChainStep, ToolCall};

pub const MEMORY_SCHEMA: &str = "guardian.incident/v1";

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("memory persistence failed: {0}")]
    Persist(#[from] std::io::Error),
    #[error("corrupt memory line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("invalid record: {0}")]
    Invalid(String),
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Feature view of an incident: categorical codes plus trend slopes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IncidentSignature {
    pub categorical: BTreeSet<String>,
    pub numeric: BTreeMap<String, f64>,
}

impl IncidentSignature {
    pub fn new<I, S>(categorical: I, numeric: BTreeMap<String, f64>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            categorical: categorical.into_iter().map(Into::into).collect(),
            numeric: numeric.into_iter().map(|(k, v)| (k, round6(v))).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.categorical.is_empty()
    }
}

/// Per-feature normalization scales for numeric proximity.
pub fn slope_scale(key: &str) -> f64 {
    match key {
        "disk_slope" => 25.0,
        "heap_slope" => 10.0,
        "retransmit_slope" => 10.0,
        _ => 10.0,
    }
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// `1 − max_k |a_k − b_k| / scale_k`, clamped; absent keys count as 0.
pub fn numeric_proximity(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    let dist = keys
        .into_iter()
        .map(|k| {
            let x = a.get(k).copied().unwrap_or(0.0);
            let y = b.get(k).copied().unwrap_or(0.0);
            (x - y).abs() / slope_scale(k)
        })
        .fold(0.0, f64::max);
    (1.0 - dist).clamp(0.0, 1.0)
}

pub const CATEGORICAL_WEIGHT: f64 = 0.7;
pub const NUMERIC_WEIGHT: f64 = 0.3;

pub fn similarity(a: &IncidentSignature, b: &IncidentSignature) -> f64 {
    let s = CATEGORICAL_WEIGHT * jaccard(&a.categorical, &b.categorical)
        + NUMERIC_WEIGHT * numeric_proximity(&a.numeric, &b.numeric);
    s.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryOutcome {
    Resolved,
    Mitigated,
    Escalated,
    BudgetExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordSource {
    AiLoop,
    Precomputed,
    MemoryMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentRecord {
    pub schema: String,
    pub id: String,
    pub opened_at_s: u64,
    pub closed_at_s: u64,
    pub source: RecordSource,
    pub trigger: Vec<String>,
    pub signature: IncidentSignature,
    pub causal_chain: Vec<ChainStep>,
    pub actions: Vec<ToolCall>,
    pub outcome: MemoryOutcome,
    pub health_transitions: Vec<String>,
}

impl IncidentRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        opened_at_s: u64,
        closed_at_s: u64,
        source: RecordSource,
        trigger: Vec<String>,
        signature: IncidentSignature,
        causal_chain: Vec<ChainStep>,
        actions: Vec<ToolCall>,
        outcome: MemoryOutcome,
        health_transitions: Vec<String>,
    ) -> Self {
        let mut r = Self {
            schema: MEMORY_SCHEMA.into(),
            id: String::new(),
            opened_at_s,
            closed_at_s,
            source,
            trigger,
            signature,
            causal_chain,
            actions,
            outcome,
            health_transitions,
        };
        r.id = r.content_hash();
        r
    }

    /// SHA-256 over the record with an empty id.
    pub fn content_hash(&self) -> String {
        let mut tmp = self.clone();
        tmp.id.clear();
        let bytes = serde_json::to_vec(&tmp).expect("record serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn validate(&self) -> Result<(), MemoryError> {
        if self.closed_at_s < self.opened_at_s {
            return Err(MemoryError::Invalid("closed_at before opened_at".into()));
        }
        if self.signature.is_empty() {
            return Err(MemoryError::Invalid("empty categorical signature".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryMatch {
    pub record: IncidentRecord,
    pub similarity: f64,
}

/// Incident memory, optionally backed by a JSONL file.
#[derive(Debug, Clone, Default)]
pub struct IncidentMemory {
    path: Option<PathBuf>,
    records: Vec<IncidentRecord>,
}

impl IncidentMemory {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or starts) the JSONL file at `path` and loads every record.
    pub fn open(path: &Path) -> Result<Self, MemoryError> {
        let mut records = Vec::new();
        match std::fs::read_to_string(path) {
            Ok(text) => {
                for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let r: IncidentRecord = serde_json::from_str(line)
                        .map_err(|e| MemoryError::Corrupt { line: n + 1, reason: e.to_string() })?;
                    records.push(r);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        Ok(Self { path: Some(path.to_path_buf()), records })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn records(&self) -> &[IncidentRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends one record; re-appending an identical record is a no-op.
    pub fn append(&mut self, mut record: IncidentRecord) -> Result<String, MemoryError> {
        record.validate()?;
        record.id = record.content_hash();
        if self.records.iter().any(|r| r.id == record.id) {
            return Ok(record.id);
        }
        if let Some(path) = &self.path {
            let mut line = serde_json::to_string(&record).expect("record serializes");
            line.push('\n');
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            f.write_all(line.as_bytes())?;
        }
        let id = record.id.clone();
        self.records.push(record);
        Ok(id)
    }

    /// Top-`k` records with similarity ≥ `min_sim`, best first; ties go to the newer record.
    pub fn similar(&self, query: &IncidentSignature, k: usize, min_sim: f64) -> Vec<MemoryMatch> {
        let mut scored: Vec<(usize, f64)> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (i, similarity(query, &r.signature)))
            .filter(|(_, s)| *s >= min_sim)
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.0.cmp(&a.0)));
        scored
            .into_iter()
            .take(k)
            .map(|(i, s)| MemoryMatch { record: self.records[i].clone(), similarity: s })
            .collect()
    }

    /// Hash over the canonical serialization of every record, in order.
    pub fn state_hash(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(serde_json::to_vec(r).expect("record serializes"));
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}
