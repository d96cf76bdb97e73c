use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::annindex::HnswIndex;
use crate::catalog::Catalog;
use crate::error::{domain_err, Error, Result};
use crate::towers::ImagePatchGrid;

/// Pixel box `(x0, y0, x1, y1)`, end-exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn as_tuple(&self) -> (usize, usize, usize, usize) {
        (self.x0, self.y0, self.x1, self.y1)
    }
}

/// Stand-in for the product detector: one box, either the whole image or
/// its centered `crop_fraction` share per side.
pub fn detect_stub(img: &ImagePatchGrid, crop_fraction: f64) -> Result<Vec<BoundingBox>> {
    if !(crop_fraction > 0.0 && crop_fraction <= 1.0) {
        return Err(domain_err!("crop fraction must be in (0, 1], got {crop_fraction}"));
    }
    let size = img.size();
    let side = ((size as f64 * crop_fraction).round() as usize).clamp(1, size);
    let x0 = (size - side) / 2;
    Ok(vec![BoundingBox {
        x0,
        y0: x0,
        x1: x0 + side,
        y1: x0 + side,
    }])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecallSource {
    I2i,
    Miem,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallCandidate {
    pub product_id: String,
    pub source: RecallSource,
    pub score: f64,
    /// Position of the matched image within the product (I2I only).
    pub image_id: Option<u32>,
}

/// Key of one product image in the I2I index.
pub fn i2i_key(product_id: &str, image_id: usize) -> String {
    format!("{product_id}/{image_id}")
}

pub fn split_i2i_key(key: &str) -> Result<(&str, u32)> {
    let bad = || Error::Consistency(format!("malformed I2I key {key:?}"));
    let (pid, idx) = key.rsplit_once('/').ok_or_else(bad)?;
    Ok((pid, idx.parse().map_err(|_| bad())?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallOptions {
    /// I2I fetches `k * overfetch` images before collapsing to products.
    pub overfetch: usize,
    pub ef_search: usize,
}

impl Default for RecallOptions {
    fn default() -> Self {
        Self {
            overfetch: 3,
            ef_search: 64,
        }
    }
}

/// Top `k` distinct products for `query` from one index.
///
/// The I2I path maps image hits to their product and keeps each product's
/// best image; the MIEM index is keyed by product already.
pub fn recall_with_dedup(
    index: &HnswIndex,
    query: &[f64],
    k: usize,
    source: RecallSource,
    opts: &RecallOptions,
) -> Result<Vec<RecallCandidate>> {
    if k == 0 {
        return Err(domain_err!("k must be at least 1"));
    }
    let fetch = match source {
        RecallSource::I2i => k * opts.overfetch.max(1),
        RecallSource::Miem => k,
    };
    let hits = index.search(query, fetch, opts.ef_search.max(fetch))?;
    let mut out: Vec<RecallCandidate> = Vec::with_capacity(k);
    match source {
        RecallSource::Miem => {
            for h in hits {
                out.push(RecallCandidate {
                    product_id: h.key,
                    source,
                    score: h.score,
                    image_id: None,
                });
            }
        }
        RecallSource::I2i => {
            let mut seen = HashSet::new();
            for h in hits {
                let (pid, img) = split_i2i_key(&h.key)?;
                if seen.insert(pid.to_string()) {
                    out.push(RecallCandidate {
                        product_id: pid.to_string(),
                        source,
                        score: h.score,
                        image_id: Some(img),
                    });
                }
            }
        }
    }
    sort_candidates(&mut out);
    out.truncate(k);
    Ok(out)
}

fn sort_candidates(c: &mut [RecallCandidate]) {
    c.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.product_id.cmp(&b.product_id)));
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedCandidate {
    pub product_id: String,
    pub score: f64,
    pub i2i: Option<f64>,
    pub miem: Option<f64>,
}

/// `i2i + weight * miem` over the union of both lists, a missing source
/// counting as 0. Sorted by fused score, ties by product id.
pub fn fuse_scores(i2i: &[RecallCandidate], miem: &[RecallCandidate], weight: f64) -> Result<Vec<FusedCandidate>> {
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(domain_err!("fusion weight must be finite and >= 0, got {weight}"));
    }
    let mut by_id: BTreeMap<&str, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for c in i2i {
        let e = by_id.entry(&c.product_id).or_default();
        e.0 = Some(e.0.map_or(c.score, |s: f64| s.max(c.score)));
    }
    for c in miem {
        let e = by_id.entry(&c.product_id).or_default();
        e.1 = Some(e.1.map_or(c.score, |s: f64| s.max(c.score)));
    }
    let mut out: Vec<FusedCandidate> = by_id
        .into_iter()
        .map(|(pid, (a, b))| FusedCandidate {
            product_id: pid.to_string(),
            score: a.unwrap_or(0.0) + weight * b.unwrap_or(0.0),
            i2i: a,
            miem: b,
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.product_id.cmp(&b.product_id)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub product_id: String,
    pub score: f64,
    /// 1-based position.
    pub rank: usize,
}

/// Final ordering: fused score plus a linear popularity bonus.
pub fn rank_candidates(candidates: &[FusedCandidate], catalog: &Catalog, popularity_weight: f64) -> Result<Vec<RankedItem>> {
    let mut seen = HashSet::with_capacity(candidates.len());
    let mut scored = Vec::with_capacity(candidates.len());
    for c in candidates {
        if !seen.insert(c.product_id.as_str()) {
            return Err(Error::Consistency(format!("product {} appears twice", c.product_id)));
        }
        let bonus = if popularity_weight == 0.0 {
            0.0
        } else {
            popularity_weight * catalog.normalized_popularity(&c.product_id)?
        };
        catalog.get(&c.product_id)?;
        scored.push((c.score + bonus, c.product_id.clone()));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(i, (score, product_id))| RankedItem {
            product_id,
            score,
            rank: i + 1,
        })
        .collect())
}
