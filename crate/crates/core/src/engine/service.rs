use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::activity::{ActivityLog, EventKind};
use super::recall::{detect_stub, fuse_scores, rank_candidates, recall_with_dedup, split_i2i_key, RankedItem, RecallOptions, RecallSource};
use crate::annindex::{HnswIndex, SharedIndex};
use crate::catalog::Catalog;
use crate::error::{domain_err, Error, Result};
use crate::towers::{ImagePatchGrid, PixelEmbedder, TowerModel};

/// The I2I index (keyed `product_id/image_id`), the MIEM index (keyed by
/// product id) and the catalog both refer to.
#[derive(Debug)]
pub struct DualIndexSet {
    pub i2i: SharedIndex,
    pub miem: SharedIndex,
    pub catalog: Catalog,
}

impl DualIndexSet {
    pub fn new(i2i: HnswIndex, miem: HnswIndex, catalog: Catalog) -> Result<Self> {
        for key in i2i.keys() {
            let (pid, _) = split_i2i_key(&key)?;
            if !catalog.contains(pid) {
                return Err(Error::Consistency(format!("I2I key {key} has no catalog product")));
            }
        }
        if let Some(k) = miem.keys().into_iter().find(|k| !catalog.contains(k)) {
            return Err(Error::Consistency(format!("MIEM key {k} has no catalog product")));
        }
        Ok(Self {
            i2i: SharedIndex::new(i2i),
            miem: SharedIndex::new(miem),
            catalog,
        })
    }

    pub fn counts(&self) -> (usize, usize) {
        (self.i2i.snapshot().len(), self.miem.snapshot().len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub fusion_weight: f64,
    pub popularity_weight: f64,
    pub crop_fraction: f64,
    pub recall: RecallOptions,
    pub default_page_size: usize,
    pub max_page_size: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            fusion_weight: 1.0,
            popularity_weight: 0.0,
            crop_fraction: 1.0,
            recall: RecallOptions::default(),
            default_page_size: 10,
            max_page_size: 200,
        }
    }
}

/// A search by image, or by precomputed embeddings.
///
/// `vector` is a query-tower embedding and bypasses detection and the
/// query tower. With `vector`, I2I recall only runs if `i2i_vector` is
/// given too.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchRequest {
    pub request_id: Option<String>,
    pub image: Option<ImagePatchGrid>,
    pub vector: Option<Vec<f64>>,
    pub i2i_vector: Option<Vec<f64>>,
    pub page_size: Option<usize>,
}

impl SearchRequest {
    pub fn image(img: ImagePatchGrid, page_size: usize) -> Self {
        Self {
            image: Some(img),
            page_size: Some(page_size),
            ..Self::default()
        }
    }
}

/// Wall time per pipeline stage, in microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub detect_us: u64,
    pub embed_us: u64,
    pub recall_us: u64,
    pub fuse_us: u64,
    pub rank_us: u64,
    pub log_us: u64,
    pub total_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub request_id: String,
    pub items: Vec<RankedItem>,
    pub timings: StageTimings,
}

pub struct SearchEngine {
    model: Arc<TowerModel>,
    pixels: PixelEmbedder,
    indexes: DualIndexSet,
    log: ActivityLog,
    cfg: EngineConfig,
    next_id: AtomicU64,
}

impl std::fmt::Debug for SearchEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SearchEngine").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

fn check_query(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) || v.iter().all(|x| *x == 0.0) {
        return Err(Error::Request(format!("{name} must be finite and non-zero")));
    }
    Ok(())
}

fn micros(t: Instant) -> u64 {
    t.elapsed().as_micros() as u64
}

impl SearchEngine {
    pub fn new(model: Arc<TowerModel>, indexes: DualIndexSet, log: ActivityLog, cfg: EngineConfig) -> Result<Self> {
        let (size, patch) = model.config().grid();
        let pixels = PixelEmbedder::new(size, patch);
        let miem_dim = indexes.miem.snapshot().dim();
        if miem_dim != model.config().out_dim {
            return Err(Error::Consistency(format!(
                "MIEM index has dim {miem_dim}, model emits {}",
                model.config().out_dim
            )));
        }
        if indexes.i2i.snapshot().dim() != pixels.dim() {
            return Err(Error::Consistency("I2I index dim does not match the image size".into()));
        }
        if cfg.fusion_weight < 0.0 || cfg.default_page_size == 0 || cfg.max_page_size < cfg.default_page_size {
            return Err(domain_err!("invalid engine config {cfg:?}"));
        }
        Ok(Self {
            model,
            pixels,
            indexes,
            log,
            cfg,
            next_id: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn model(&self) -> &TowerModel {
        &self.model
    }

    pub fn pixel_embedder(&self) -> &PixelEmbedder {
        &self.pixels
    }

    pub fn indexes(&self) -> &DualIndexSet {
        &self.indexes
    }

    pub fn activity_log(&self) -> &ActivityLog {
        &self.log
    }

    /// Detection, embedding, both recalls, fusion, ranking and logging for
    /// one request. Rejected requests are logged with their error.
    pub fn handle_search(&self, req: &SearchRequest) -> Result<SearchResponse> {
        let request_id = self.request_id(req.request_id.as_deref());
        match self.search_inner(&request_id, req) {
            Ok(r) => Ok(r),
            Err(e) => Err(self.reject(&request_id, e)),
        }
    }

    fn request_id(&self, given: Option<&str>) -> String {
        match given {
            Some(id) => id.to_string(),
            None => format!("req-{:08}", self.next_id.fetch_add(1, Ordering::Relaxed)),
        }
    }

    /// Logs a request that failed before or during search and maps input
    /// errors to [`Error::Request`].
    pub fn reject(&self, request_id: &str, e: Error) -> Error {
        if let Err(log_err) = self.log.record(request_id, EventKind::Request, json!({ "error": e.to_string() })) {
            return log_err;
        }
        match e {
            Error::Shape(m) | Error::Domain(m) | Error::Format(m) => Error::Request(m),
            other => other,
        }
    }

    /// Logs a request whose payload could not be decoded.
    pub fn reject_payload(&self, request_id: Option<&str>, e: Error) -> Error {
        let id = self.request_id(request_id);
        self.reject(&id, e)
    }

    fn search_inner(&self, request_id: &str, req: &SearchRequest) -> Result<SearchResponse> {
        let start = Instant::now();
        let mut timings = StageTimings::default();
        let page = req.page_size.unwrap_or(self.cfg.default_page_size);
        if page == 0 || page > self.cfg.max_page_size {
            return Err(Error::Request(format!("page_size must be in 1..={}", self.cfg.max_page_size)));
        }
        let (miem_q, i2i_q) = match (&req.image, &req.vector) {
            (Some(img), None) => {
                let t = Instant::now();
                let bbox = detect_stub(img, self.cfg.crop_fraction)?[0];
                let crop = img.crop(bbox.as_tuple())?;
                timings.detect_us = micros(t);
                let t = Instant::now();
                let q = self.model.query_embedding(&crop)?;
                let p = self.pixels.embed(&crop)?;
                timings.embed_us = micros(t);
                (q, Some(p))
            }
            (None, Some(v)) => {
                check_query("vector", v)?;
                if let Some(p) = &req.i2i_vector {
                    check_query("i2i_vector", p)?;
                }
                (v.clone(), req.i2i_vector.clone())
            }
            _ => return Err(Error::Request("exactly one of image or vector is required".into())),
        };

        let t = Instant::now();
        let opts = self.cfg.recall;
        let i2i = match &i2i_q {
            Some(q) => recall_with_dedup(&self.indexes.i2i.snapshot(), q, page, RecallSource::I2i, &opts)?,
            None => Vec::new(),
        };
        let miem = recall_with_dedup(&self.indexes.miem.snapshot(), &miem_q, page, RecallSource::Miem, &opts)?;
        timings.recall_us = micros(t);

        let t = Instant::now();
        let mut fused = fuse_scores(&i2i, &miem, self.cfg.fusion_weight)?;
        fused.truncate(2 * page);
        timings.fuse_us = micros(t);

        let t = Instant::now();
        let mut items = rank_candidates(&fused, &self.indexes.catalog, self.cfg.popularity_weight)?;
        items.truncate(page);
        timings.rank_us = micros(t);

        let t = Instant::now();
        let source = if req.image.is_some() { "image" } else { "vector" };
        self.log.record(
            request_id,
            EventKind::Request,
            json!({ "source": source, "page_size": page, "returned": items.len() }),
        )?;
        for it in &items {
            self.log.record(
                request_id,
                EventKind::Impression,
                json!({ "product_id": it.product_id, "rank": it.rank, "score": it.score }),
            )?;
        }
        timings.log_us = micros(t);
        timings.total_us = micros(start);
        Ok(SearchResponse {
            request_id: request_id.to_string(),
            items,
            timings,
        })
    }

    /// Records a client interaction with a returned product.
    pub fn record_event(&self, request_id: &str, kind: EventKind, product_id: &str) -> Result<()> {
        if !kind.is_interaction() {
            return Err(Error::Request(format!("{kind:?} events are written by the server")));
        }
        if !self.indexes.catalog.contains(product_id) {
            return Err(Error::Request(format!("unknown product {product_id}")));
        }
        self.log.record(request_id, kind, json!({ "product_id": product_id }))
    }
}
