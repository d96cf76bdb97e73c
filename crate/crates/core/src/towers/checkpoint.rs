//! Binary checkpoint format.
//!
//! ```text
//! magic "MMTW" | version u32 | 13 config fields u64 | trained stage u8
//! array count u32
//! per array: name len u32 | name | rows u32 | cols u32 | rows*cols f64
//! ```
//!
//! All integers and floats are little-endian; arrays appear in parameter
//! registration order.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::{TowerConfig, TowerModel};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

const MAGIC: &[u8; 4] = b"MMTW";
pub const CHECKPOINT_VERSION: u32 = 1;

fn config_fields(c: &TowerConfig) -> [u64; 13] {
    [
        c.image_size as u64,
        c.patch_size as u64,
        c.token_dim as u64,
        c.heads as u64,
        c.mlp_ratio as u64,
        c.image_layers as u64,
        c.title_layers as u64,
        c.fusion_layers as u64,
        c.out_dim as u64,
        c.vocab_size as u64,
        c.max_title_len as u64,
        c.k_images as u64,
        c.seed,
    ]
}

pub fn to_bytes(model: &TowerModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for f in config_fields(model.config()) {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.push(model.trained_stage());
    let store = model.params();
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn fmt(msg: impl Into<String>) -> Error {
    Error::Format(format!("checkpoint: {}", msg.into()))
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| fmt("truncated"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| fmt("truncated"))?;
    Ok(u64::from_le_bytes(b))
}

pub fn from_bytes(bytes: &[u8]) -> Result<TowerModel> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated"))?;
    if &magic != MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let mut f = [0u64; 13];
    for v in f.iter_mut() {
        *v = read_u64(&mut r)?;
    }
    let u = |x: u64| x as usize;
    let cfg = TowerConfig {
        image_size: u(f[0]),
        patch_size: u(f[1]),
        token_dim: u(f[2]),
        heads: u(f[3]),
        mlp_ratio: u(f[4]),
        image_layers: u(f[5]),
        title_layers: u(f[6]),
        fusion_layers: u(f[7]),
        out_dim: u(f[8]),
        vocab_size: u(f[9]),
        max_title_len: u(f[10]),
        k_images: u(f[11]),
        seed: f[12],
    };
    cfg.validate()?;
    let mut stage = [0u8; 1];
    r.read_exact(&mut stage).map_err(|_| fmt("truncated"))?;
    let n = read_u32(&mut r)? as usize;
    let mut arrays = Vec::with_capacity(n);
    for _ in 0..n {
        let len = read_u32(&mut r)? as usize;
        if len > bytes.len() - r.position() as usize {
            return Err(fmt("array name overruns the file"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| fmt("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| fmt("name is not utf-8"))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let remaining = bytes.len() - r.position() as usize;
        if rows.saturating_mul(cols).saturating_mul(8) > remaining {
            return Err(fmt(format!("array {name} overruns the file")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        arrays.push((name, Tensor::matrix(rows, cols, data)?));
    }
    if r.position() as usize != bytes.len() {
        return Err(fmt("trailing bytes"));
    }
    let mut m = TowerModel::from_parts(cfg, arrays)?;
    m.set_trained_stage(stage[0]);
    Ok(m)
}

pub fn save(model: &TowerModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TowerModel> {
    from_bytes(&fs::read(path)?)
}

/// Hex SHA-256 of the serialized model.
pub fn fingerprint(model: &TowerModel) -> String {
    hex::encode(Sha256::digest(to_bytes(model)))
}
