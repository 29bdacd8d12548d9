//! Append-only audit trail.
//!
//! [`JsonlAuditSink`] writes one JSON object per line. A single flusher
//! thread group-commits pending records: it writes up to 16 at a time,
//! fsyncs, then wakes the callers. `append` returns only after its record is
//! on disk.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::Id128;
use crate::policy::Verdict;

pub const MAX_BATCH: usize = 16;
pub const MAX_BATCH_DELAY: Duration = Duration::from_millis(50);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuditError {
    #[error("STORE_UNAVAILABLE: {0}")]
    StoreUnavailable(String),
}

impl AuditError {
    pub fn code(&self) -> &'static str {
        "STORE_UNAVAILABLE"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub ts: u64,
    pub request_id: Id128,
    pub subject: String,
    pub action: String,
    pub resource: String,
    pub verdict: Verdict,
    pub reason: String,
    pub http_status: u16,
    pub latency_ms: u64,
}

/// Query filter; every set field must match. `from`/`to` bound `ts`
/// inclusively.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<Id128>,
}

impl AuditFilter {
    pub fn matches(&self, r: &AuditRecord) -> bool {
        self.subject.as_ref().map_or(true, |s| *s == r.subject)
            && self.from.map_or(true, |f| r.ts >= f)
            && self.to.map_or(true, |t| r.ts <= t)
            && self.verdict.map_or(true, |v| v == r.verdict)
            && self.request_id.map_or(true, |id| id == r.request_id)
    }
}

pub trait AuditSink: Send + Sync {
    /// Durably appends `record`.
    fn append(&self, record: AuditRecord) -> Result<(), AuditError>;

    /// Matching records in append order.
    fn query(&self, filter: &AuditFilter) -> Result<Vec<AuditRecord>, AuditError>;

    /// Whether an append would currently be attempted at all.
    fn healthy(&self) -> bool;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// In-memory sink. Can be switched off to exercise fail-closed paths.
#[derive(Debug)]
pub struct MemoryAuditSink {
    records: RwLock<Vec<AuditRecord>>,
    available: AtomicBool,
}

impl Default for MemoryAuditSink {
    fn default() -> Self {
        MemoryAuditSink { records: RwLock::new(Vec::new()), available: AtomicBool::new(true) }
    }
}

impl MemoryAuditSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_available(&self, available: bool) {
        self.available.store(available, Ordering::SeqCst);
    }
}

impl AuditSink for MemoryAuditSink {
    fn append(&self, record: AuditRecord) -> Result<(), AuditError> {
        if !self.healthy() {
            return Err(AuditError::StoreUnavailable("sink disabled".into()));
        }
        self.records.write().push(record);
        Ok(())
    }

    fn query(&self, filter: &AuditFilter) -> Result<Vec<AuditRecord>, AuditError> {
        Ok(self.records.read().iter().filter(|r| filter.matches(r)).cloned().collect())
    }

    fn healthy(&self) -> bool {
        self.available.load(Ordering::SeqCst)
    }

    fn len(&self) -> usize {
        self.records.read().len()
    }
}

/// A sink whose store is gone.
#[derive(Debug, Default, Clone, Copy)]
pub struct FailingAuditSink;

impl AuditSink for FailingAuditSink {
    fn append(&self, _: AuditRecord) -> Result<(), AuditError> {
        Err(AuditError::StoreUnavailable("store offline".into()))
    }

    fn query(&self, _: &AuditFilter) -> Result<Vec<AuditRecord>, AuditError> {
        Err(AuditError::StoreUnavailable("store offline".into()))
    }

    fn healthy(&self) -> bool {
        false
    }

    fn len(&self) -> usize {
        0
    }
}

#[derive(Default)]
struct Queue {
    pending: Vec<(u64, AuditRecord)>,
    next_seq: u64,
    /// Every sequence number below this has been resolved.
    done_below: u64,
    failed: Option<String>,
    shutdown: bool,
}

struct Shared {
    queue: Mutex<Queue>,
    work: Condvar,
    done: Condvar,
    committed: RwLock<Vec<AuditRecord>>,
}

/// Durable JSONL sink with group commit.
pub struct JsonlAuditSink {
    path: PathBuf,
    shared: Arc<Shared>,
    flusher: Mutex<Option<JoinHandle<()>>>,
}

impl std::fmt::Debug for JsonlAuditSink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JsonlAuditSink").field("path", &self.path).finish_non_exhaustive()
    }
}

impl JsonlAuditSink {
    /// Opens (or creates) `path`, loading any records already in it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, AuditError> {
        let path = path.as_ref().to_path_buf();
        let unavailable = |e: std::io::Error| AuditError::StoreUnavailable(format!("{}: {e}", path.display()));
        let mut existing = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(unavailable)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(unavailable)?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec = serde_json::from_str(&line).map_err(|e| {
                    AuditError::StoreUnavailable(format!("{} line {}: {e}", path.display(), n + 1))
                })?;
                existing.push(rec);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(unavailable)?;
        let shared = Arc::new(Shared {
            queue: Mutex::new(Queue::default()),
            work: Condvar::new(),
            done: Condvar::new(),
            committed: RwLock::new(existing),
        });
        let worker = Arc::clone(&shared);
        let handle = thread::Builder::new()
            .name("audit-flush".into())
            .spawn(move || flush_loop(&worker, file))
            .map_err(unavailable)?;
        Ok(JsonlAuditSink { path, shared, flusher: Mutex::new(Some(handle)) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

fn write_batch(file: &mut File, batch: &[(u64, AuditRecord)]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(batch.len() * 256);
    for (_, rec) in batch {
        serde_json::to_writer(&mut buf, rec)?;
        buf.push(b'\n');
    }
    file.write_all(&buf)?;
    file.sync_data()
}

fn flush_loop(shared: &Shared, mut file: File) {
    loop {
        let batch: Vec<(u64, AuditRecord)> = {
            let mut q = shared.queue.lock();
            while q.pending.is_empty() && !q.shutdown {
                shared.work.wait_for(&mut q, MAX_BATCH_DELAY);
            }
            if q.pending.is_empty() {
                return;
            }
            let n = q.pending.len().min(MAX_BATCH);
            q.pending.drain(..n).collect()
        };
        let last = batch.last().map(|(s, _)| *s).unwrap_or(0);
        let result = write_batch(&mut file, &batch);
        let mut q = shared.queue.lock();
        match result {
            Ok(()) => shared.committed.write().extend(batch.into_iter().map(|(_, r)| r)),
            Err(e) => {
                log::error!("audit write failed: {e}");
                q.failed = Some(e.to_string());
            }
        }
        q.done_below = last + 1;
        shared.done.notify_all();
    }
}

impl AuditSink for JsonlAuditSink {
    fn append(&self, record: AuditRecord) -> Result<(), AuditError> {
        let mut q = self.shared.queue.lock();
        if let Some(e) = &q.failed {
            return Err(AuditError::StoreUnavailable(e.clone()));
        }
        if q.shutdown {
            return Err(AuditError::StoreUnavailable("sink closed".into()));
        }
        let seq = q.next_seq;
        q.next_seq += 1;
        q.pending.push((seq, record));
        self.shared.work.notify_one();
        while q.done_below <= seq {
            self.shared.done.wait(&mut q);
        }
        match &q.failed {
            Some(e) => Err(AuditError::StoreUnavailable(e.clone())),
            None => Ok(()),
        }
    }

    fn query(&self, filter: &AuditFilter) -> Result<Vec<AuditRecord>, AuditError> {
        Ok(self.shared.committed.read().iter().filter(|r| filter.matches(r)).cloned().collect())
    }

    fn healthy(&self) -> bool {
        let q = self.shared.queue.lock();
        q.failed.is_none() && !q.shutdown
    }

    fn len(&self) -> usize {
        self.shared.committed.read().len()
    }
}

impl Drop for JsonlAuditSink {
    fn drop(&mut self) {
        self.shared.queue.lock().shutdown = true;
        self.shared.work.notify_all();
        if let Some(h) = self.flusher.lock().take() {
            let _ = h.join();
        }
    }
}
