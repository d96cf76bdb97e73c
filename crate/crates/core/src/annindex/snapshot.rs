//! Binary index snapshot.
//!
//! ```text
//! magic "MMHN" | version u32
//! dim u32 | M u32 | M_max0 u32 | ef_construction u32 | ef_search u32 | seed u64
//! rebuild flag u8 | rebuild ratio f64
//! node count u32 | live count u32 | deleted count u32 | entry u32 (u32::MAX if none)
//! per node: key len u32 | key | level u32 | deleted u8 | dim f64
//! per node, per layer 0..=level: degree u32 | neighbor ids u32
//! ```
//!
//! Everything is little-endian.

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::hnsw::{HnswConfig, HnswIndex, Node};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MMHN";
pub const SNAPSHOT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn to_bytes(index: &HnswIndex) -> Vec<u8> {
    let c = &index.cfg;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    for v in [c.dim, c.m, c.m_max0, c.ef_construction, c.ef_search] {
        put_u32(&mut out, v);
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.push(c.rebuild_ratio.is_some() as u8);
    out.extend_from_slice(&c.rebuild_ratio.unwrap_or(0.0).to_le_bytes());
    put_u32(&mut out, index.nodes.len());
    put_u32(&mut out, index.live.len());
    put_u32(&mut out, index.deleted);
    out.extend_from_slice(&index.entry.unwrap_or(u32::MAX).to_le_bytes());
    for n in &index.nodes {
        put_u32(&mut out, n.key.len());
        out.extend_from_slice(n.key.as_bytes());
        put_u32(&mut out, n.level);
        out.push(n.deleted as u8);
        for v in &n.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for n in &index.nodes {
        for adj in &n.neighbors {
            put_u32(&mut out, adj.len());
            for id in adj {
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
    }
    out
}

fn fmt(msg: impl Into<String>) -> Error {
    Error::Format(format!("index snapshot: {}", msg.into()))
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.cur.read_exact(&mut b).map_err(|_| fmt("truncated"))?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.cur.position() as usize
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<HnswIndex> {
    let mut r = Reader { cur: Cursor::new(bytes) };
    if &r.take::<4>()? != MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = r.u32()?;
    if version != SNAPSHOT_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let (dim, m, m_max0, ef_construction, ef_search) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.usize()?);
    let seed = r.u64()?;
    let has_ratio = r.u8()? != 0;
    let ratio = r.f64()?;
    let cfg = HnswConfig {
        dim,
        m,
        m_max0,
        ef_construction,
        ef_search,
        seed,
        rebuild_ratio: has_ratio.then_some(ratio),
    };
    cfg.validate()?;
    let (count, live_count, deleted) = (r.usize()?, r.usize()?, r.usize()?);
    let entry = r.u32()?;
    let mut nodes = Vec::with_capacity(count.min(r.remaining()));
    for _ in 0..count {
        let len = r.usize()?;
        if len > r.remaining() {
            return Err(fmt("key overruns the file"));
        }
        let mut key = vec![0u8; len];
        r.cur.read_exact(&mut key).map_err(|_| fmt("truncated"))?;
        let key = String::from_utf8(key).map_err(|_| fmt("key is not utf-8"))?;
        let level = r.usize()?;
        if level > 64 {
            return Err(fmt(format!("implausible level {level}")));
        }
        let is_deleted = r.u8()? != 0;
        if dim.saturating_mul(8) > r.remaining() {
            return Err(fmt("vector overruns the file"));
        }
        let vector = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        nodes.push(Node {
            key,
            vector,
            level,
            neighbors: vec![Vec::new(); level + 1],
            deleted: is_deleted,
        });
    }
    for n in nodes.iter_mut() {
        for adj in n.neighbors.iter_mut() {
            let deg = r.usize()?;
            if deg.saturating_mul(4) > r.remaining() {
                return Err(fmt("adjacency overruns the file"));
            }
            *adj = (0..deg).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        }
    }
    if r.remaining() != 0 {
        return Err(fmt("trailing bytes"));
    }
    let mut live = HashMap::with_capacity(live_count);
    for (i, n) in nodes.iter().enumerate() {
        if !n.deleted && live.insert(n.key.clone(), i as u32).is_some() {
            return Err(fmt(format!("key {} is live twice", n.key)));
        }
    }
    let entry = match entry {
        u32::MAX => None,
        e if (e as usize) < nodes.len() => Some(e),
        e => return Err(fmt(format!("entry point {e} out of range"))),
    };
    let index = HnswIndex {
        cfg,
        nodes,
        live,
        entry,
        deleted,
    };
    if index.live.len() != live_count {
        return Err(fmt("live count mismatch"));
    }
    index.check_invariants().map_err(|e| fmt(e.to_string()))?;
    Ok(index)
}

pub fn save(index: &HnswIndex, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(index))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<HnswIndex> {
    from_bytes(&fs::read(path)?)
}
