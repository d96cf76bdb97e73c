//! Catalog records and the on-disk image encoding.
//!
//! Images travel as binary PGM (`P5`, 8-bit grayscale). Catalog files are
//! newline-delimited JSON, one [`ProductRecord`] per line, with image bytes
//! base64-encoded.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Encoded image bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageBlob(pub Vec<u8>);

impl ImageBlob {
    pub fn bytes(&self) -> &[u8] {
        &self.0
    }
}

impl Serialize for ImageBlob {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for ImageBlob {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        B64.decode(s.as_bytes())
            .map(ImageBlob)
            .map_err(serde::de::Error::custom)
    }
}

/// A decoded grayscale raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

/// Encodes a raster as binary PGM, quantizing to 8 bits.
pub fn encode_pgm(width: usize, height: usize, pixels: &[f64]) -> ImageBlob {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    ImageBlob(out)
}

/// Decodes binary PGM with a maxval of at most 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<Raster> {
    let bad = |msg: &str| Error::Format(format!("pgm: {msg}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ascii"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("missing P5 magic"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(bad("unsupported dimensions or maxval"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let body = bytes.get(pos..pos + width * height).ok_or_else(|| bad("truncated raster"))?;
    let pixels = body.iter().map(|b| *b as f64 / maxval as f64).collect();
    Ok(Raster {
        width,
        height,
        pixels,
    })
}

/// One catalog entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductRecord {
    pub product_id: String,
    pub title: String,
    pub images: Vec<ImageBlob>,
    pub category: u32,
    #[serde(default = "default_true")]
    pub available: bool,
    #[serde(default)]
    pub popularity: f64,
}

fn default_true() -> bool {
    true
}

impl ProductRecord {
    /// SHA-256 over the title and image bytes, length-prefixed.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.title.len() as u64).to_le_bytes());
        h.update(self.title.as_bytes());
        for img in &self.images {
            h.update((img.0.len() as u64).to_le_bytes());
            h.update(&img.0);
        }
        h.finalize().into()
    }
}

/// Per-product facts needed after retrieval: category, popularity and
/// availability, keyed by product id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    entries: HashMap<String, CatalogEntry>,
    max_popularity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CatalogEntry {
    pub category: u32,
    pub popularity: f64,
    pub available: bool,
}

impl Catalog {
    pub fn from_records(records: &[ProductRecord]) -> Result<Self> {
        let mut entries = HashMap::with_capacity(records.len());
        let mut max_popularity: f64 = 0.0;
        for r in records {
            let e = CatalogEntry {
                category: r.category,
                popularity: r.popularity,
                available: r.available,
            };
            if entries.insert(r.product_id.clone(), e).is_some() {
                return Err(Error::Conflict(format!("duplicate product id {}", r.product_id)));
            }
            max_popularity = max_popularity.max(r.popularity);
        }
        Ok(Self { entries, max_popularity })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, product_id: &str) -> bool {
        self.entries.contains_key(product_id)
    }

    pub fn get(&self, product_id: &str) -> Result<&CatalogEntry> {
        self.entries
            .get(product_id)
            .ok_or_else(|| Error::Consistency(format!("product {product_id} is not in the catalog")))
    }

    pub fn category(&self, product_id: &str) -> Result<u32> {
        Ok(self.get(product_id)?.category)
    }

    /// Popularity divided by the catalog maximum; 0 when nothing is popular.
    pub fn normalized_popularity(&self, product_id: &str) -> Result<f64> {
        let p = self.get(product_id)?.popularity;
        Ok(if self.max_popularity > 0.0 {
            p / self.max_popularity
        } else {
            0.0
        })
    }
}

pub fn write_catalog(path: &Path, records: &[ProductRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_catalog(path: &Path) -> Result<Vec<ProductRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_exact_on_quantized_values() {
        let px: Vec<f64> = (0..12).map(|i| (i * 20) as f64 / 255.0).collect();
        let blob = encode_pgm(4, 3, &px);
        let r = decode_pgm(blob.bytes()).unwrap();
        assert_eq!((r.width, r.height), (4, 3));
        assert_eq!(r.pixels, px);
    }

    #[test]
    fn pgm_accepts_comments_and_rejects_garbage() {
        let mut bytes = b"P5 # comment\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        assert_eq!(decode_pgm(&bytes).unwrap().pixels, vec![0.0, 1.0]);
        assert!(decode_pgm(b"not an image").is_err());
        assert!(decode_pgm(b"P5\n4 4\n255\n\x00\x01").is_err());
        assert!(decode_pgm(b"").is_err());
    }

    #[test]
    fn content_hash_tracks_title_and_images() {
        let base = ProductRecord {
            product_id: "p1".into(),
            title: "Sepatu Pria Casual".into(),
            images: vec![ImageBlob(vec![1, 2, 3])],
            category: 0,
            available: true,
            popularity: 0.0,
        };
        let mut edited = base.clone();
        edited.title.push('!');
        let mut reimaged = base.clone();
        reimaged.images[0].0[0] = 9;
        let mut moved = base.clone();
        moved.popularity = 5.0;
        assert_ne!(base.content_hash(), edited.content_hash());
        assert_ne!(base.content_hash(), reimaged.content_hash());
        assert_eq!(base.content_hash(), moved.content_hash());
    }

    #[test]
    fn catalog_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.jsonl");
        let recs = vec![ProductRecord {
            product_id: "a".into(),
            title: "w0003 w0004".into(),
            images: vec![encode_pgm(2, 2, &[0.0, 0.2, 0.4, 1.0])],
            category: 3,
            available: true,
            popularity: 1.5,
        }];
        write_catalog(&path, &recs).unwrap();
        assert_eq!(read_catalog(&path).unwrap(), recs);
    }
}
