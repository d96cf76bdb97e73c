use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::partition::{day_timestamp, FeaturePartition, FeatureRecord, PartitionStore};
use crate::annindex::{normalized, HnswConfig, HnswIndex};
use crate::catalog::ProductRecord;
use crate::engine::{detect_stub, i2i_key, split_i2i_key};
use crate::error::{Error, Result};
use crate::towers::{Embedding, ImagePatchGrid, ItemInput, PixelEmbedder, TowerModel, Vocab};

/// The live catalog of one day.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogSnapshot {
    pub day: NaiveDate,
    pub records: Vec<ProductRecord>,
}

impl CatalogSnapshot {
    pub fn new(day: NaiveDate, records: Vec<ProductRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        if let Some(dup) = records.iter().find(|r| !seen.insert(r.product_id.as_str())) {
            return Err(Error::Conflict(format!("duplicate product id {}", dup.product_id)));
        }
        Ok(Self { day, records })
    }

    /// Available products by id.
    fn live(&self) -> HashMap<&str, &ProductRecord> {
        self.records
            .iter()
            .filter(|r| r.available)
            .map(|r| (r.product_id.as_str(), r))
            .collect()
    }
}

/// Turns a product into keyed embeddings for one index.
pub trait FeatureExtractor {
    /// Short job name, used as the partition directory.
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn grid(&self) -> (usize, usize);
    fn extract(&self, record: &ProductRecord) -> Result<Vec<(String, Embedding)>>;
    /// The product a key belongs to.
    fn product_of<'a>(&self, key: &'a str) -> &'a str;
}

fn decodable_images(record: &ProductRecord, (size, patch): (usize, usize)) -> Vec<(usize, ImagePatchGrid)> {
    record
        .images
        .iter()
        .enumerate()
        .filter_map(|(i, b)| ImagePatchGrid::from_blob(b, size, patch).ok().map(|g| (i, g)))
        .collect()
}

/// One fused title + images embedding per product.
#[derive(Debug, Clone)]
pub struct MiemExtractor<'a> {
    model: &'a TowerModel,
    vocab: Vocab,
}

impl<'a> MiemExtractor<'a> {
    pub fn new(model: &'a TowerModel) -> Result<Self> {
        Ok(Self {
            model,
            vocab: Vocab::new(model.config().vocab_size)?,
        })
    }

    pub fn item_input(&self, record: &ProductRecord) -> Result<ItemInput> {
        let cfg = self.model.config();
        let title = self.vocab.tokenize(&record.title, cfg.max_title_len);
        let images: Vec<ImagePatchGrid> = decodable_images(record, cfg.grid()).into_iter().map(|(_, g)| g).collect();
        ItemInput::new(title, &images, cfg.k_images, cfg.grid(), record.category)
    }
}

impl FeatureExtractor for MiemExtractor<'_> {
    fn name(&self) -> &str {
        "miem"
    }

    fn dim(&self) -> usize {
        self.model.config().out_dim
    }

    fn grid(&self) -> (usize, usize) {
        self.model.config().grid()
    }

    fn extract(&self, record: &ProductRecord) -> Result<Vec<(String, Embedding)>> {
        let emb = self.model.item_embedding(&self.item_input(record)?)?;
        Ok(vec![(record.product_id.clone(), emb)])
    }

    fn product_of<'k>(&self, key: &'k str) -> &'k str {
        key
    }
}

/// One I2I embedding per product image, keyed `product_id/image_id`.
#[derive(Debug, Clone)]
pub struct I2iExtractor {
    embedder: PixelEmbedder,
}

impl I2iExtractor {
    pub fn new(embedder: PixelEmbedder) -> Self {
        Self { embedder }
    }
}

impl FeatureExtractor for I2iExtractor {
    fn name(&self) -> &str {
        "i2i"
    }

    fn dim(&self) -> usize {
        self.embedder.dim()
    }

    fn grid(&self) -> (usize, usize) {
        self.embedder.grid()
    }

    fn extract(&self, record: &ProductRecord) -> Result<Vec<(String, Embedding)>> {
        let mut out = Vec::new();
        for (i, g) in decodable_images(record, self.grid()) {
            let bbox = detect_stub(&g, 1.0)?[0];
            if let Ok(e) = self.embedder.embed(&g.crop(bbox.as_tuple())?) {
                out.push((i2i_key(&record.product_id, i), e));
            }
        }
        if out.is_empty() {
            return Err(Error::Domain(format!("{} has no embeddable image", record.product_id)));
        }
        Ok(out)
    }

    fn product_of<'k>(&self, key: &'k str) -> &'k str {
        split_i2i_key(key).map(|(p, _)| p).unwrap_or(key)
    }
}

/// One embedding per (image, title) pair, keyed like I2I.
#[derive(Debug, Clone)]
pub struct PairExtractor<'a> {
    inner: MiemExtractor<'a>,
}

impl<'a> PairExtractor<'a> {
    pub fn new(model: &'a TowerModel) -> Result<Self> {
        Ok(Self {
            inner: MiemExtractor::new(model)?,
        })
    }
}

impl FeatureExtractor for PairExtractor<'_> {
    fn name(&self) -> &str {
        "pair"
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn grid(&self) -> (usize, usize) {
        self.inner.grid()
    }

    fn extract(&self, record: &ProductRecord) -> Result<Vec<(String, Embedding)>> {
        let cfg = self.inner.model.config();
        let title = self.inner.vocab.tokenize(&record.title, cfg.max_title_len);
        let mut out = Vec::new();
        for (i, g) in decodable_images(record, cfg.grid()) {
            out.push((i2i_key(&record.product_id, i), self.inner.model.pair_embedding(&g, &title)?));
        }
        if out.is_empty() {
            return Err(Error::Domain(format!("{} has no decodable image", record.product_id)));
        }
        Ok(out)
    }

    fn product_of<'k>(&self, key: &'k str) -> &'k str {
        split_i2i_key(key).map(|(p, _)| p).unwrap_or(key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RejectReason {
    Title,
    Images,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validation {
    Accept,
    Reject(RejectReason),
}

/// Rejects titles made only of punctuation and whitespace, and products
/// none of whose images decode.
pub fn validate_item(record: &ProductRecord, grid: (usize, usize)) -> Validation {
    if record.title.chars().all(|c| c.is_whitespace() || !c.is_alphanumeric()) {
        return Validation::Reject(RejectReason::Title);
    }
    if decodable_images(record, grid).is_empty() {
        return Validation::Reject(RejectReason::Images);
    }
    Validation::Accept
}

/// Entries of `prev` whose product is still available with the same
/// content hash.
pub fn copy_forward(prev: &FeaturePartition, catalog: &CatalogSnapshot, ex: &dyn FeatureExtractor) -> FeaturePartition {
    let live = catalog.live();
    let mut hashes: HashMap<&str, [u8; 32]> = HashMap::new();
    let mut out = FeaturePartition::empty(catalog.day);
    for (key, rec) in &prev.entries {
        let pid = ex.product_of(key);
        let Some(product) = live.get(pid) else { continue };
        let h = *hashes.entry(pid).or_insert_with(|| product.content_hash());
        if h == rec.content_hash {
            out.entries.insert(key.clone(), rec.clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedFailure {
    pub product_id: String,
    pub reason: String,
}

/// Embeds every available product that has no entry in `partial`.
/// Invalid or failing products are skipped and listed.
pub fn embed_new_items(
    catalog: &CatalogSnapshot,
    partial: FeaturePartition,
    ex: &dyn FeatureExtractor,
) -> (FeaturePartition, Vec<EmbedFailure>) {
    let present: BTreeSet<String> = partial.entries.keys().map(|k| ex.product_of(k).to_string()).collect();
    let mut out = partial;
    out.day = catalog.day;
    let ts = day_timestamp(catalog.day);
    let mut failures = Vec::new();
    let mut todo: Vec<&ProductRecord> = catalog
        .records
        .iter()
        .filter(|r| r.available && !present.contains(&r.product_id))
        .collect();
    todo.sort_by(|a, b| a.product_id.cmp(&b.product_id));
    for r in todo {
        let fail = |reason: String| EmbedFailure {
            product_id: r.product_id.clone(),
            reason,
        };
        if let Validation::Reject(why) = validate_item(r, ex.grid()) {
            failures.push(fail(format!("rejected: {why:?}").to_lowercase()));
            continue;
        }
        match ex.extract(r) {
            Ok(features) => {
                let hash = r.content_hash();
                for (key, embedding) in features {
                    out.entries.insert(
                        key,
                        FeatureRecord {
                            content_hash: hash,
                            embedding,
                            embedded_at: ts,
                        },
                    );
                }
            }
            Err(e) => failures.push(fail(e.to_string())),
        }
    }
    (out, failures)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum IndexCommand {
    Delete { product_id: String },
    Update { product_id: String, embedding: Vec<f64> },
}

impl IndexCommand {
    pub fn key(&self) -> &str {
        match self {
            Self::Delete { product_id } | Self::Update { product_id, .. } => product_id,
        }
    }
}

/// Deletes for keys gone from `curr`, updates for keys that are new or
/// whose embedding changed. Deletes come first; each group is sorted.
pub fn diff_partitions(prev: &FeaturePartition, curr: &FeaturePartition) -> Vec<IndexCommand> {
    let mut out: Vec<IndexCommand> = prev
        .entries
        .keys()
        .filter(|k| !curr.entries.contains_key(*k))
        .map(|k| IndexCommand::Delete { product_id: k.clone() })
        .collect();
    for (k, rec) in &curr.entries {
        let changed = match prev.entries.get(k) {
            None => true,
            Some(old) => old.embedding.len() != rec.embedding.len()
                || old.embedding.iter().zip(&rec.embedding).any(|(a, b)| a.to_bits() != b.to_bits()),
        };
        if changed {
            out.push(IndexCommand::Update {
                product_id: k.clone(),
                embedding: rec.embedding.clone(),
            });
        }
    }
    out
}

pub fn commands_to_ndjson(commands: &[IndexCommand]) -> Result<String> {
    let mut s = String::new();
    for c in commands {
        s.push_str(&serde_json::to_string(c)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn commands_from_ndjson(text: &str) -> Result<Vec<IndexCommand>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyReport {
    pub deleted: usize,
    pub updated: usize,
    /// Deletes of keys the index did not hold.
    pub missing: usize,
    /// Updates that matched the stored vector and were skipped.
    pub unchanged: usize,
}

/// Applies deletes, then updates. An update of a live key replaces it
/// unless the vector is unchanged, so replaying a command list is a no-op.
pub fn apply_commands(index: &mut HnswIndex, commands: &[IndexCommand]) -> Result<ApplyReport> {
    let mut report = ApplyReport::default();
    for c in commands {
        if let IndexCommand::Delete { product_id } = c {
            match index.delete(product_id) {
                Ok(()) => report.deleted += 1,
                Err(Error::NotFound(_)) => {
                    log::warn!("delete of unknown key {product_id} ignored");
                    report.missing += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
    for c in commands {
        if let IndexCommand::Update { product_id, embedding } = c {
            if index.contains(product_id) {
                if same_direction(index.vector(product_id).unwrap_or(&[]), embedding) {
                    report.unchanged += 1;
                    continue;
                }
                index.delete(product_id)?;
            }
            index.insert(product_id, embedding)?;
            report.updated += 1;
        }
    }
    Ok(report)
}

fn same_direction(stored: &[f64], v: &[f64]) -> bool {
    normalized(v).is_some_and(|u| u == stored)
}

/// A fresh index over every entry of `p`, in key order.
pub fn build_index_from_partition(p: &FeaturePartition, cfg: HnswConfig) -> Result<HnswIndex> {
    let mut index = HnswIndex::new(cfg)?;
    for (k, r) in &p.entries {
        index.insert(k, &r.embedding)?;
    }
    Ok(index)
}

/// Embeds `records` from scratch and indexes them, skipping failures.
pub fn build_index(records: &[ProductRecord], ex: &dyn FeatureExtractor, cfg: HnswConfig) -> Result<(HnswIndex, Vec<EmbedFailure>)> {
    let day = NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date");
    let snapshot = CatalogSnapshot::new(day, records.to_vec())?;
    let (p, failures) = embed_new_items(&snapshot, FeaturePartition::empty(day), ex);
    Ok((build_index_from_partition(&p, cfg)?, failures))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DailyReport {
    pub day: String,
    pub copied: usize,
    pub embedded: usize,
    pub skipped: usize,
    pub deleted: usize,
    pub updated: usize,
    pub duration_ms: u64,
    pub failures: Vec<EmbedFailure>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DailyOptions {
    /// Allow a first run with no previous partition.
    pub bootstrap: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DailyOutput {
    pub partition: FeaturePartition,
    pub commands: Vec<IndexCommand>,
    pub report: DailyReport,
}

/// Copy forward from the newest earlier partition, embed what is missing,
/// diff, apply the commands to `index` and store the new partition.
///
/// Rerunning a day recomputes it from the same previous partition, so the
/// partition and commands come out identical.
pub fn daily_job(
    store: &PartitionStore,
    catalog: &CatalogSnapshot,
    ex: &dyn FeatureExtractor,
    index: &mut HnswIndex,
    model_hash: &str,
    opts: DailyOptions,
) -> Result<DailyOutput> {
    let start = Instant::now();
    let _lock = store.lock()?;
    let mut report = DailyReport {
        day: super::partition::day_key(catalog.day),
        ..DailyReport::default()
    };
    let failed = |report: &DailyReport, e: Error| Error::State(format!("daily job {} failed after {report:?}: {e}", report.day));
    let prev = match store.latest_before(catalog.day)? {
        Some(d) => store.read(d).map_err(|e| failed(&report, e))?.0,
        None if opts.bootstrap => FeaturePartition::empty(catalog.day),
        None => {
            return Err(Error::State(format!(
                "no partition before {}; pass bootstrap to start from empty",
                report.day
            )))
        }
    };
    let partial = copy_forward(&prev, catalog, ex);
    report.copied = partial.len();
    let (curr, failures) = embed_new_items(catalog, partial, ex);
    report.embedded = curr.len() - report.copied;
    report.skipped = failures.len();
    report.failures = failures;
    let commands = diff_partitions(&prev, &curr);
    let applied = apply_commands(index, &commands).map_err(|e| failed(&report, e))?;
    report.deleted = applied.deleted;
    report.updated = applied.updated;
    store
        .write(&curr, &commands_to_ndjson(&commands)?, model_hash)
        .map_err(|e| failed(&report, e))?;
    report.duration_ms = start.elapsed().as_millis() as u64;
    Ok(DailyOutput {
        partition: curr,
        commands,
        report,
    })
}
