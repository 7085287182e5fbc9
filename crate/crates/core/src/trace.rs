//! Session trace records and sinks.
//!
//! A trace is JSONL: one [`TraceRecord`] per line, each an envelope
//! `{"type", "step", "timestamp", "payload"}`. Payload shapes per type:
//!
//! | type           | payload                                                             |
//! |----------------|---------------------------------------------------------------------|
//! | `session_meta` | [`SessionMeta`]                                                     |
//! | `init_program` | [`InitProgramPayload`]                                              |
//! | `critique`     | [`CritiquePayload`]                                                 |
//! | `candidate`    | [`CandidatePayload`]                                                |
//! | `verdict`      | [`VerdictPayload`]                                                  |
//! | `revert`       | [`RevertPayload`]                                                   |
//! | `override`     | [`OverridePayload`]                                                 |
//! | `final`        | [`FinalPayload`]                                                    |
//!
//! Diagrams inside payloads are stored as their canonical JSON objects.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::engine::{Override, Phase, SessionConfig, StepOutcome};
use crate::gateway::{CritiqueReport, FailureFeedback, Strategy};
use crate::grammar::{diagram_from_value, serialize_diagram, Canvas, Diagram, GrammarError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordType {
    SessionMeta,
    InitProgram,
    Critique,
    Candidate,
    Verdict,
    Revert,
    Override,
    Final,
}

impl RecordType {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordType::SessionMeta => "session_meta",
            RecordType::InitProgram => "init_program",
            RecordType::Critique => "critique",
            RecordType::Candidate => "candidate",
            RecordType::Verdict => "verdict",
            RecordType::Revert => "revert",
            RecordType::Override => "override",
            RecordType::Final => "final",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    #[serde(rename = "type")]
    pub kind: RecordType,
    pub step: u32,
    pub timestamp: DateTime<Utc>,
    pub payload: Value,
}

impl TraceRecord {
    pub fn new<P: Serialize>(kind: RecordType, step: u32, payload: &P) -> Self {
        Self {
            kind,
            step,
            timestamp: Utc::now(),
            payload: serde_json::to_value(payload).expect("trace payloads serialise"),
        }
    }

    pub fn payload_as<P: DeserializeOwned>(&self) -> Result<P, TraceError> {
        serde_json::from_value(self.payload.clone()).map_err(|e| TraceError::Payload {
            kind: self.kind.as_str(),
            step: self.step,
            message: e.to_string(),
        })
    }

    /// The canonical diagram text carried by this record, if any.
    pub fn diagram_text(&self, canvas: Canvas) -> Option<Result<String, GrammarError>> {
        let v = match self.kind {
            RecordType::InitProgram | RecordType::Candidate | RecordType::Override | RecordType::Final => {
                self.payload.get("diagram")?
            }
            _ => return None,
        };
        Some(diagram_from_value(v, canvas).map(|d| serialize_diagram(&d)))
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace records serialise")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    pub created_at: DateTime<Utc>,
    pub config: SessionConfig,
    /// Hex SHA-256 of the sketch PNG.
    pub sketch_digest: String,
    pub backend: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitProgramPayload {
    pub description: CritiqueReport,
    pub diagram: Value,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected_responses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiquePayload {
    pub report: CritiqueReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePayload {
    pub strategy: Strategy,
    pub diagram: Value,
    pub repair_count: u32,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected_responses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictPayload {
    pub selected: usize,
    pub rationale: String,
    pub outcome: StepOutcome,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected_responses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevertPayload {
    pub failure: FailureFeedback,
    pub consecutive_reverts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverridePayload {
    pub action: Override,
    /// Current diagram after the override.
    pub diagram: Value,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalPayload {
    pub phase: Phase,
    pub diagram: Value,
    pub step_count: u32,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{kind} record at step {step}: {message}")]
    Payload {
        kind: &'static str,
        step: u32,
        message: String,
    },
    #[error("trace is missing its session_meta record")]
    MissingMeta,
    #[error("{0}")]
    Store(String),
}

/// A full trace held in memory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SessionTrace {
    pub records: Vec<TraceRecord>,
}

impl SessionTrace {
    pub fn meta(&self) -> Result<SessionMeta, TraceError> {
        self.records
            .iter()
            .find(|r| r.kind == RecordType::SessionMeta)
            .ok_or(TraceError::MissingMeta)?
            .payload_as()
    }

    pub fn of_type(&self, kind: RecordType) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    /// Step indices that have a critique, in order.
    pub fn steps(&self) -> Vec<u32> {
        self.of_type(RecordType::Critique).map(|r| r.step).collect()
    }

    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line).map_err(|e| TraceError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self { records })
    }

    pub fn read(path: &Path) -> Result<Self, TraceError> {
        let file = File::open(path)?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| TraceError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self { records })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    /// Last diagram recorded by the session, if any.
    pub fn last_diagram(&self, canvas: Canvas) -> Option<Diagram> {
        self.records.iter().rev().find_map(|r| {
            let v = match r.kind {
                RecordType::Final | RecordType::Override | RecordType::InitProgram => r.payload.get("diagram")?,
                _ => return None,
            };
            diagram_from_value(v, canvas).ok()
        })
    }
}

/// Lightweight view of loop state reported after each commit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub phase: Phase,
    pub step_count: u32,
}

/// Where the loop writes its records. `append` must be durable before it
/// returns; the loop commits state only afterwards.
pub trait TraceSink: Send + Sync {
    fn append(&self, records: &[TraceRecord]) -> Result<(), TraceError>;

    fn committed(&self, _state: &StateSummary) -> Result<(), TraceError> {
        Ok(())
    }
}

/// Keeps records in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    records: Mutex<Vec<TraceRecord>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_records(records: Vec<TraceRecord>) -> Self {
        Self {
            records: Mutex::new(records),
        }
    }

    pub fn trace(&self) -> SessionTrace {
        SessionTrace {
            records: self.records.lock().map(|r| r.clone()).unwrap_or_default(),
        }
    }
}

impl TraceSink for MemorySink {
    fn append(&self, records: &[TraceRecord]) -> Result<(), TraceError> {
        self.records
            .lock()
            .map_err(|_| TraceError::Store("memory sink poisoned".into()))?
            .extend_from_slice(records);
        Ok(())
    }
}

/// Appends JSONL to a single file, syncing after each batch.
#[derive(Debug)]
pub struct FileSink {
    path: PathBuf,
    lock: Mutex<()>,
}

impl FileSink {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self, TraceError> {
        let path = path.into();
        File::create(&path)?;
        Ok(Self {
            path,
            lock: Mutex::new(()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Writes lines and syncs them to disk.
pub fn append_lines(path: &Path, records: &[TraceRecord]) -> std::io::Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&r.to_line());
        buf.push('\n');
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(buf.as_bytes())?;
    f.sync_data()
}

impl TraceSink for FileSink {
    fn append(&self, records: &[TraceRecord]) -> Result<(), TraceError> {
        let _guard = self
            .lock
            .lock()
            .map_err(|_| TraceError::Store("file sink poisoned".into()))?;
        append_lines(&self.path, records)?;
        Ok(())
    }
}
