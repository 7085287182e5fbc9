//! Durable, append-only session storage.
//!
//! Layout under the root directory:
//! ```text
//! index.jsonl                      one summary line per state change
//! sessions/{id}/trace.jsonl        the session trace
//! sessions/{id}/sketch-{sha256}.png
//! ```
//! Appends are fsynced before they return. Each session has one writer at
//! a time (a per-session lock); readers may read a prefix concurrently.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{Phase, SessionConfig};
use crate::trace::{
    append_lines, CritiquePayload, RecordType, SessionMeta, SessionTrace, StateSummary, TraceError, TraceRecord,
    TraceSink,
};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("out-of-order record: {0}")]
    OutOfOrderRecord(String),
    #[error("store i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub phase: Phase,
    pub step_count: u32,
    pub backend: String,
}

/// Where the next record may go.
#[derive(Debug, Clone, Copy, Default)]
struct Cursor {
    has_meta: bool,
    has_init: bool,
    last_step: u32,
    /// A step's critique is recorded but its verdict is not.
    open: bool,
}

impl Cursor {
    fn check(&self, r: &TraceRecord) -> Result<Cursor, String> {
        let mut next = *self;
        let here = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(format!(
                    "{} at step {} {what} (last step {}, {})",
                    r.kind.as_str(),
                    r.step,
                    self.last_step,
                    if self.open { "open" } else { "closed" }
                ))
            }
        };
        match r.kind {
            RecordType::SessionMeta => {
                here(!self.has_meta && r.step == 0, "must be the first record")?;
                next.has_meta = true;
            }
            RecordType::InitProgram => {
                here(
                    self.has_meta && !self.has_init && r.step == 0,
                    "must follow session_meta",
                )?;
                next.has_init = true;
            }
            _ if !self.has_init => here(false, "precedes the initial program")?,
            RecordType::Critique => {
                here(!self.open && r.step == self.last_step + 1, "must open the next step")?;
                let converged = r
                    .payload_as::<CritiquePayload>()
                    .map(|p| p.report.discrepancies.is_empty())
                    .map_err(|e| e.to_string())?;
                next.last_step = r.step;
                next.open = !converged;
            }
            RecordType::Candidate => here(self.open && r.step == self.last_step, "is outside its step")?,
            RecordType::Verdict => {
                here(self.open && r.step == self.last_step, "is outside its step")?;
                next.open = false;
            }
            RecordType::Revert | RecordType::Override | RecordType::Final => {
                here(!self.open && r.step == self.last_step, "must follow a closed step")?
            }
        }
        Ok(next)
    }
}

#[derive(Debug)]
pub struct SessionStore {
    root: PathBuf,
    cursors: Mutex<HashMap<String, Arc<Mutex<Cursor>>>>,
    index_lock: Mutex<()>,
}

/// Hex SHA-256 of `bytes`.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn valid_id(id: &str) -> bool {
    uuid::Uuid::parse_str(id).is_ok()
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("sessions"))?;
        Ok(Self {
            root,
            cursors: Mutex::new(HashMap::new()),
            index_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    pub fn trace_path(&self, id: &str) -> PathBuf {
        self.session_dir(id).join("trace.jsonl")
    }

    pub fn exists(&self, id: &str) -> bool {
        valid_id(id) && self.trace_path(id).is_file()
    }

    fn require(&self, id: &str) -> Result<(), StoreError> {
        if self.exists(id) {
            Ok(())
        } else {
            Err(StoreError::UnknownSession(id.to_string()))
        }
    }

    /// Creates the session directory, stores the sketch and writes the
    /// `session_meta` record.
    pub fn create_session(
        &self,
        config: &SessionConfig,
        backend: &str,
        sketch_png: &[u8],
    ) -> Result<SessionMeta, StoreError> {
        let id = uuid::Uuid::new_v4().to_string();
        let meta = SessionMeta {
            id: id.clone(),
            created_at: Utc::now(),
            config: config.clone(),
            sketch_digest: digest(sketch_png),
            backend: backend.to_string(),
        };
        let dir = self.session_dir(&id);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(format!("sketch-{}.png", meta.sketch_digest)), sketch_png)?;
        let record = TraceRecord::new(RecordType::SessionMeta, 0, &meta);
        let cursor = Cursor::default().check(&record).map_err(StoreError::OutOfOrderRecord)?;
        append_lines(&self.trace_path(&id), &[record])?;
        self.cursors
            .lock()
            .expect("cursor map")
            .insert(id.clone(), Arc::new(Mutex::new(cursor)));
        self.write_summary(&SessionSummary {
            id,
            created_at: meta.created_at,
            updated_at: meta.created_at,
            phase: Phase::Initializing,
            step_count: 0,
            backend: backend.to_string(),
        })?;
        Ok(meta)
    }

    fn cursor(&self, id: &str) -> Result<Arc<Mutex<Cursor>>, StoreError> {
        self.require(id)?;
        let mut map = self.cursors.lock().expect("cursor map");
        if let Some(c) = map.get(id) {
            return Ok(c.clone());
        }
        // First write since start-up: rebuild the cursor from disk.
        let mut cursor = Cursor::default();
        for r in SessionTrace::read(&self.trace_path(id))?.records {
            cursor = cursor.check(&r).map_err(StoreError::OutOfOrderRecord)?;
        }
        let c = Arc::new(Mutex::new(cursor));
        map.insert(id.to_string(), c.clone());
        Ok(c)
    }

    /// Validates ordering, then appends and syncs. All-or-nothing per call.
    pub fn append(&self, id: &str, records: &[TraceRecord]) -> Result<(), StoreError> {
        let cursor = self.cursor(id)?;
        let mut guard = cursor.lock().expect("session lock");
        let mut next = *guard;
        for r in records {
            next = next.check(r).map_err(StoreError::OutOfOrderRecord)?;
        }
        append_lines(&self.trace_path(id), records)?;
        *guard = next;
        Ok(())
    }

    pub fn load_trace(&self, id: &str) -> Result<SessionTrace, StoreError> {
        self.require(id)?;
        Ok(SessionTrace::read(&self.trace_path(id))?)
    }

    pub fn sketch_png(&self, id: &str) -> Result<Vec<u8>, StoreError> {
        let meta = self.load_trace(id)?.meta()?;
        Ok(fs::read(
            self.session_dir(id).join(format!("sketch-{}.png", meta.sketch_digest)),
        )?)
    }

    fn write_summary(&self, s: &SessionSummary) -> Result<(), StoreError> {
        let _guard = self.index_lock.lock().expect("index lock");
        let mut line = serde_json::to_string(s).map_err(std::io::Error::other)?;
        line.push('\n');
        use std::io::Write;
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.join("index.jsonl"))?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        Ok(())
    }

    /// Records a new phase / step count for the session.
    pub fn update_summary(&self, id: &str, state: &StateSummary) -> Result<(), StoreError> {
        let current = self
            .summaries()?
            .into_iter()
            .find(|s| s.id == id)
            .ok_or_else(|| StoreError::UnknownSession(id.to_string()))?;
        self.write_summary(&SessionSummary {
            updated_at: Utc::now(),
            phase: state.phase,
            step_count: state.step_count,
            ..current
        })
    }

    fn summaries(&self) -> Result<Vec<SessionSummary>, StoreError> {
        let text = match fs::read_to_string(self.root.join("index.jsonl")) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut order: Vec<String> = Vec::new();
        let mut latest: HashMap<String, SessionSummary> = HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            // A torn final line from a crash is skipped.
            let Ok(s) = serde_json::from_str::<SessionSummary>(line) else {
                continue;
            };
            if !latest.contains_key(&s.id) {
                order.push(s.id.clone());
            }
            latest.insert(s.id.clone(), s);
        }
        Ok(order.into_iter().filter_map(|id| latest.remove(&id)).collect())
    }

    /// Sessions newest first, optionally only those in `phase`.
    pub fn list_sessions(&self, phase: Option<Phase>) -> Result<Vec<SessionSummary>, StoreError> {
        let mut all: Vec<(usize, SessionSummary)> = self
            .summaries()?
            .into_iter()
            .enumerate()
            .filter(|(_, s)| phase.is_none_or(|p| s.phase == p))
            .collect();
        all.sort_by(|(ia, a), (ib, b)| b.created_at.cmp(&a.created_at).then(ib.cmp(ia)));
        Ok(all.into_iter().map(|(_, s)| s).collect())
    }

    pub fn sink(self: &Arc<Self>, id: &str) -> StoreSink {
        StoreSink {
            store: self.clone(),
            id: id.to_string(),
        }
    }
}

/// Trace sink writing into one session of a store.
#[derive(Debug, Clone)]
pub struct StoreSink {
    store: Arc<SessionStore>,
    id: String,
}

impl TraceSink for StoreSink {
    fn append(&self, records: &[TraceRecord]) -> Result<(), TraceError> {
        self.store
            .append(&self.id, records)
            .map_err(|e| TraceError::Store(e.to_string()))
    }

    fn committed(&self, state: &StateSummary) -> Result<(), TraceError> {
        self.store
            .update_summary(&self.id, state)
            .map_err(|e| TraceError::Store(e.to_string()))
    }
}
