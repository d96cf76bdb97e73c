//! Day-partitioned feature store.
//!
//! ```text
//! <root>/<day>/manifest.json   {day, record_file, count, model_checkpoint_hash}
//! <root>/<day>/records.bin     magic "MMFP" | version u32 | count u32 | records sorted by id
//!     record: id len u32 | id | content hash [32] | dim u32 | dim f64 | embedded_at i64
//! <root>/<day>/commands.ndjson one index command per line
//! <root>/LOCK                  held while a daily job runs
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MMFP";
const VERSION: u32 = 1;
pub const RECORD_FILE: &str = "records.bin";
pub const COMMAND_FILE: &str = "commands.ndjson";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub content_hash: [u8; 32],
    pub embedding: Vec<f64>,
    /// Seconds since the Unix epoch.
    pub embedded_at: i64,
}

/// Every live key's embedding on one day.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePartition {
    pub day: NaiveDate,
    pub entries: BTreeMap<String, FeatureRecord>,
}

impl FeaturePartition {
    pub fn empty(day: NaiveDate) -> Self {
        Self {
            day,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub day: String,
    pub record_file: String,
    pub count: usize,
    pub model_checkpoint_hash: String,
}

pub fn parse_day(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| Error::Usage(format!("bad day {s:?}: {e}")))
}

pub fn day_key(day: NaiveDate) -> String {
    day.format("%Y-%m-%d").to_string()
}

/// Midnight UTC of `day`, the timestamp given to embeddings computed that
/// day so reruns produce identical partitions.
pub fn day_timestamp(day: NaiveDate) -> i64 {
    day.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc().timestamp()
}

pub fn encode_records(p: &FeaturePartition) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(p.entries.len() as u32).to_le_bytes());
    for (id, r) in &p.entries {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&r.content_hash);
        out.extend_from_slice(&(r.embedding.len() as u32).to_le_bytes());
        for v in &r.embedding {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&r.embedded_at.to_le_bytes());
    }
    out
}

pub fn decode_records(day: NaiveDate, bytes: &[u8]) -> Result<FeaturePartition> {
    let bad = |m: &str| Error::Format(format!("record file: {m}"));
    let mut r = Cursor::new(bytes);
    let mut take = |n: usize| -> Result<Vec<u8>> {
        let left = bytes.len() - r.position() as usize;
        if n > left {
            return Err(bad("truncated"));
        }
        let mut b = vec![0u8; n];
        r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
        Ok(b)
    };
    let u32_of = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    if take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    if u32_of(take(4)?) != VERSION as usize {
        return Err(bad("unsupported version"));
    }
    let count = u32_of(take(4)?);
    let mut entries = BTreeMap::new();
    let mut last: Option<String> = None;
    for _ in 0..count {
        let len = u32_of(take(4)?);
        let id = String::from_utf8(take(len)?).map_err(|_| bad("id is not utf-8"))?;
        if last.as_ref().is_some_and(|l| *l >= id) {
            return Err(bad("records are not sorted by id"));
        }
        let content_hash: [u8; 32] = take(32)?.try_into().expect("32 bytes");
        let dim = u32_of(take(4)?);
        let raw = take(dim.checked_mul(8).ok_or_else(|| bad("dim overflow"))?)?;
        let embedding = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let embedded_at = i64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        last = Some(id.clone());
        entries.insert(
            id,
            FeatureRecord {
                content_hash,
                embedding,
                embedded_at,
            },
        );
    }
    if r.position() as usize != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(FeaturePartition { day, entries })
}

/// Partitions of one job under `root`, one directory per day.
#[derive(Debug, Clone)]
pub struct PartitionStore {
    root: PathBuf,
    retention: usize,
}

/// Exclusive hold on a store; released on drop.
#[derive(Debug)]
pub struct StoreLock {
    path: PathBuf,
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl PartitionStore {
    /// Keeps the newest `retention` partitions.
    pub fn open(root: &Path, retention: usize) -> Result<Self> {
        if retention == 0 {
            return Err(Error::Usage("retention must keep at least one partition".into()));
        }
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            retention,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn day_dir(&self, day: NaiveDate) -> PathBuf {
        self.root.join(day_key(day))
    }

    pub fn lock(&self) -> Result<StoreLock> {
        let path = self.root.join("LOCK");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(StoreLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::State(format!(
                "{} is locked by another daily job",
                self.root.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }

    /// Days with a complete partition, oldest first.
    pub fn days(&self) -> Result<Vec<NaiveDate>> {
        let mut days = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Ok(day) = NaiveDate::parse_from_str(name, "%Y-%m-%d") {
                if entry.path().join("manifest.json").is_file() {
                    days.push(day);
                }
            }
        }
        days.sort();
        Ok(days)
    }

    /// Newest partition strictly before `day`.
    pub fn latest_before(&self, day: NaiveDate) -> Result<Option<NaiveDate>> {
        Ok(self.days()?.into_iter().rev().find(|d| *d < day))
    }

    pub fn latest(&self) -> Result<Option<NaiveDate>> {
        Ok(self.days()?.pop())
    }

    /// Writes `p` (replacing any partition of the same day) and its
    /// commands, then drops partitions beyond the retention window.
    pub fn write(&self, p: &FeaturePartition, commands_ndjson: &str, model_hash: &str) -> Result<Manifest> {
        let key = day_key(p.day);
        let staging = self.root.join(format!(".{key}.tmp"));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        fs::write(staging.join(RECORD_FILE), encode_records(p))?;
        fs::write(staging.join(COMMAND_FILE), commands_ndjson)?;
        let manifest = Manifest {
            day: key.clone(),
            record_file: RECORD_FILE.into(),
            count: p.len(),
            model_checkpoint_hash: model_hash.into(),
        };
        fs::write(staging.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        let dest = self.day_dir(p.day);
        if dest.exists() {
            fs::remove_dir_all(&dest)?;
        }
        fs::rename(&staging, &dest)?;
        self.prune()?;
        Ok(manifest)
    }

    fn prune(&self) -> Result<()> {
        let days = self.days()?;
        let excess = days.len().saturating_sub(self.retention);
        for d in &days[..excess] {
            fs::remove_dir_all(self.day_dir(*d))?;
        }
        Ok(())
    }

    pub fn read(&self, day: NaiveDate) -> Result<(FeaturePartition, Manifest)> {
        let dir = self.day_dir(day);
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.is_file() {
            return Err(Error::NotFound(format!("no partition for {}", day_key(day))));
        }
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
        let p = decode_records(day, &fs::read(dir.join(&manifest.record_file))?)?;
        if p.len() != manifest.count {
            return Err(Error::Format(format!(
                "manifest says {} records, file has {}",
                manifest.count,
                p.len()
            )));
        }
        Ok((p, manifest))
    }
}
