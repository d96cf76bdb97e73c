use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::Mutex;
use std::thread::JoinHandle;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Request,
    Impression,
    Click,
    AddToCart,
    Order,
}

impl EventKind {
    /// Kinds reported by clients; the rest are written by the server.
    pub fn is_interaction(self) -> bool {
        matches!(self, Self::Click | Self::AddToCart | Self::Order)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityEvent {
    /// Microseconds since the Unix epoch, strictly increasing across the log.
    pub ts_micros: u64,
    pub request_id: String,
    pub kind: EventKind,
    pub payload: serde_json::Value,
}

enum Msg {
    Event(ActivityEvent),
    Flush(Sender<io::Result<()>>),
}

/// Append-only NDJSON event log. Producers enqueue from any thread; one
/// writer thread owns the file.
pub struct ActivityLog {
    tx: Mutex<Option<Sender<Msg>>>,
    worker: Mutex<Option<JoinHandle<()>>>,
    clock: AtomicU64,
}

impl std::fmt::Debug for ActivityLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ActivityLog").finish_non_exhaustive()
    }
}

impl ActivityLog {
    /// Appends to `path`, creating it and its directory if needed.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::with_writer(Box::new(BufWriter::new(file))))
    }

    /// A log that drops every event.
    pub fn discard() -> Self {
        Self::with_writer(Box::new(io::sink()))
    }

    fn with_writer(mut out: Box<dyn Write + Send>) -> Self {
        let (tx, rx) = mpsc::channel::<Msg>();
        let worker = std::thread::spawn(move || {
            let mut failed: Option<io::Error> = None;
            for msg in rx {
                match msg {
                    Msg::Event(e) => {
                        if failed.is_none() {
                            let line = serde_json::to_string(&e).expect("events serialize");
                            if let Err(err) = writeln!(out, "{line}") {
                                failed = Some(err);
                            }
                        }
                    }
                    Msg::Flush(ack) => {
                        let r = match failed.take() {
                            Some(err) => Err(err),
                            None => out.flush(),
                        };
                        let _ = ack.send(r);
                    }
                }
            }
            let _ = out.flush();
        });
        Self {
            tx: Mutex::new(Some(tx)),
            worker: Mutex::new(Some(worker)),
            clock: AtomicU64::new(0),
        }
    }

    fn now(&self) -> u64 {
        let wall = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_micros() as u64)
            .unwrap_or(0);
        let mut last = self.clock.load(Ordering::Relaxed);
        loop {
            let ts = wall.max(last + 1);
            match self.clock.compare_exchange_weak(last, ts, Ordering::AcqRel, Ordering::Relaxed) {
                Ok(_) => return ts,
                Err(seen) => last = seen,
            }
        }
    }

    fn send(&self, msg: Msg) -> Result<()> {
        let guard = self.tx.lock().unwrap_or_else(|e| e.into_inner());
        let tx = guard.as_ref().ok_or_else(|| Error::State("activity log is closed".into()))?;
        tx.send(msg).map_err(|_| Error::State("activity log writer stopped".into()))
    }

    pub fn record(&self, request_id: &str, kind: EventKind, payload: serde_json::Value) -> Result<()> {
        self.send(Msg::Event(ActivityEvent {
            ts_micros: self.now(),
            request_id: request_id.to_string(),
            kind,
            payload,
        }))
    }

    /// Blocks until every event enqueued so far is on disk.
    pub fn flush(&self) -> Result<()> {
        let (ack, done) = mpsc::channel();
        self.send(Msg::Flush(ack))?;
        done.recv()
            .map_err(|_| Error::State("activity log writer stopped".into()))?
            .map_err(Error::Io)
    }

    /// Flushes and stops the writer thread.
    pub fn close(&self) -> Result<()> {
        let r = self.flush();
        self.tx.lock().unwrap_or_else(|e| e.into_inner()).take();
        if let Some(h) = self.worker.lock().unwrap_or_else(|e| e.into_inner()).take() {
            let _ = h.join();
        }
        r
    }
}

impl Drop for ActivityLog {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

pub fn read_activity_log(path: &Path) -> Result<Vec<ActivityEvent>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
