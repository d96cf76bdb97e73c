//! Synthetic catalog and click-log generator.
//!
//! Classes come in pairs that share a strong visual motif, so the pair is
//! hard to tell apart from raw pixels. Each class adds a faint cue tile
//! repeated in every patch and owns a small set of title tokens; each item adds its own
//! pattern and title tokens; each image of an item adds a view pattern and
//! pixel noise. Titles therefore separate classes cleanly while images only
//! do so through the faint cue.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::catalog::{read_catalog, write_catalog, ImageBlob, ProductRecord};
use crate::error::{domain_err, Error, Result};
use crate::towers::{ImagePatchGrid, TitleTokens, Vocab};

/// How a logged query image relates to the clicked item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Identical,
    Similar,
    Noise,
}

/// `<query image, clicked title, clicked images>` with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickLogTriplet {
    pub query_image: ImagePatchGrid,
    pub clicked_title: TitleTokens,
    pub clicked_images: Vec<ImagePatchGrid>,
    pub class_id: u32,
    pub relation: Relation,
    /// Index of the clicked product in the catalog.
    pub product: usize,
}

/// Amplitudes of the image components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageStyle {
    pub motif: f64,
    pub cue: f64,
    pub cue_pixels: usize,
    pub item: f64,
    pub view: f64,
    pub noise: f64,
}

impl Default for ImageStyle {
    fn default() -> Self {
        Self {
            motif: 0.28,
            cue: 0.16,
            cue_pixels: 8,
            item: 0.22,
            view: 0.12,
            noise: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCatalogSpec {
    pub classes: usize,
    pub items_per_class: usize,
    /// Inclusive range of images per item.
    pub images_per_item: (usize, usize),
    pub vocab_size: usize,
    /// Identical / similar / noise proportions.
    pub relation_mix: [f64; 3],
    pub seed: u64,
    pub triplets_per_item: usize,
    /// Fraction of items listed twice under different product ids.
    pub twin_fraction: f64,
    pub image_size: usize,
    pub patch_size: usize,
    pub max_title_len: usize,
    pub style: ImageStyle,
}

impl Default for SyntheticCatalogSpec {
    fn default() -> Self {
        Self {
            classes: 200,
            items_per_class: 10,
            images_per_item: (2, 6),
            vocab_size: 1024,
            relation_mix: [0.45, 0.50, 0.05],
            seed: 0,
            triplets_per_item: 1,
            twin_fraction: 0.05,
            image_size: 16,
            patch_size: 4,
            max_title_len: 16,
            style: ImageStyle::default(),
        }
    }
}

const CLASS_TOKENS: usize = 3;

impl SyntheticCatalogSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.items_per_class == 0 || self.triplets_per_item == 0 {
            return Err(domain_err!("class, item and triplet counts must be >= 1"));
        }
        let (lo, hi) = self.images_per_item;
        if lo == 0 || hi < lo {
            return Err(domain_err!("images per item range {lo}..={hi} is invalid"));
        }
        let sum: f64 = self.relation_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.relation_mix.iter().any(|p| *p < 0.0) {
            return Err(domain_err!("relation mix {:?} must be non-negative and sum to 1", self.relation_mix));
        }
        if !(0.0..=1.0).contains(&self.twin_fraction) {
            return Err(domain_err!("twin fraction must be in [0, 1]"));
        }
        if self.vocab_size < self.pool_start() + 8 {
            return Err(domain_err!(
                "vocab of {} too small for {} classes (need {})",
                self.vocab_size,
                self.classes,
                self.pool_start() + 8
            ));
        }
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(domain_err!("image size must be a multiple of the patch size"));
        }
        Ok(())
    }

    fn pool_start(&self) -> usize {
        2 + self.classes * CLASS_TOKENS
    }
}

/// Latent labels behind the generated catalog.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Latent item of each product; twins share one.
    pub latent_item: Vec<usize>,
    pub class_of: Vec<u32>,
}

impl GroundTruth {
    /// Products listing the same latent item as `product`, itself included.
    pub fn same_item(&self, product: usize) -> Vec<usize> {
        let item = self.latent_item[product];
        (0..self.latent_item.len())
            .filter(|p| self.latent_item[*p] == item)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticCatalogSpec,
    pub catalog: Vec<ProductRecord>,
    pub logs: Vec<ClickLogTriplet>,
    pub truth: GroundTruth,
}

fn blob_pattern(rng: &mut ChaCha8Rng, size: usize, blobs: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for _ in 0..blobs {
        let cx = rng.random_range(0.0..size as f64);
        let cy = rng.random_range(0.0..size as f64);
        let sigma = rng.random_range(1.2..3.0) * size as f64 / 16.0;
        let amp = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                out[y * size + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    out.iter_mut().for_each(|v| *v /= peak);
    out
}

fn sparse_pattern(rng: &mut ChaCha8Rng, size: usize, pixels: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let mut idx: Vec<usize> = (0..size * size).collect();
    idx.shuffle(rng);
    for &i in idx.iter().take(pixels) {
        out[i] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    }
    out
}

/// A sparse `patch x patch` pattern repeated in every patch.
fn tiled_pattern(rng: &mut ChaCha8Rng, size: usize, patch: usize, pixels: usize) -> Vec<f64> {
    let tile = sparse_pattern(rng, patch, pixels.min(patch * patch));
    (0..size * size)
        .map(|i| tile[(i / size % patch) * patch + i % size % patch])
        .collect()
}

struct LatentItem {
    class: usize,
    pattern: Vec<f64>,
    tokens: Vec<u32>,
}

struct World {
    motifs: Vec<Vec<f64>>,
    cues: Vec<Vec<f64>>,
    items: Vec<LatentItem>,
}

impl World {
    /// Draws class motifs, class cues and latent items from `rng`.
    fn new(spec: &SyntheticCatalogSpec, rng: &mut ChaCha8Rng) -> Self {
        let size = spec.image_size;
        let motifs: Vec<Vec<f64>> = (0..spec.classes.div_ceil(2))
            .map(|_| blob_pattern(rng, size, 3))
            .collect();
        let cues: Vec<Vec<f64>> = (0..spec.classes)
            .map(|_| tiled_pattern(rng, size, spec.patch_size, spec.style.cue_pixels))
            .collect();
        let pool = (spec.pool_start() as u32)..(spec.vocab_size as u32);
        let mut items = Vec::new();
        for class in 0..spec.classes {
            for _ in 0..spec.items_per_class {
                let pattern = blob_pattern(rng, size, 2);
                let mut tokens: Vec<u32> = (0..2).map(|_| rng.random_range(pool.clone())).collect();
                let base = (2 + class * CLASS_TOKENS) as u32;
                let mut class_toks: Vec<u32> = (0..CLASS_TOKENS as u32).map(|i| base + i).collect();
                class_toks.shuffle(rng);
                tokens.extend_from_slice(&class_toks[..2]);
                items.push(LatentItem { class, pattern, tokens });
            }
        }
        Self { motifs, cues, items }
    }

    fn render(&self, spec: &SyntheticCatalogSpec, rng: &mut ChaCha8Rng, item: &LatentItem, view: &[f64]) -> Vec<f64> {
        let st = spec.style;
        let noise = Normal::new(0.0, st.noise.max(1e-12)).expect("positive std");
        let motif = &self.motifs[item.class / 2];
        let cue = &self.cues[item.class];
        (0..spec.image_size * spec.image_size)
            .map(|i| {
                let v = 0.5
                    + st.motif * motif[i]
                    + st.cue * cue[i]
                    + st.item * item.pattern[i]
                    + st.view * view[i]
                    + noise.sample(rng);
                v.clamp(0.0, 1.0)
            })
            .collect()
    }
}

/// A fresh photo of a latent item, never part of the catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldOutView {
    pub latent_item: usize,
    pub class_id: u32,
    pub image: ImagePatchGrid,
}

/// `per_item` new views of every latent item of the corpus `spec`
/// describes, each with its own view pattern and noise. Deterministic in
/// `(spec, seed)`.
pub fn render_heldout_views(spec: &SyntheticCatalogSpec, per_item: usize, seed: u64) -> Result<Vec<HeldOutView>> {
    spec.validate()?;
    let world = World::new(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6c64_6f75_7421);
    let mut out = Vec::with_capacity(world.items.len() * per_item);
    for (li, item) in world.items.iter().enumerate() {
        for _ in 0..per_item {
            let view = blob_pattern(&mut rng, spec.image_size, 1);
            let px = world.render(spec, &mut rng, item, &view);
            let g = ImagePatchGrid::new(spec.image_size, spec.patch_size, px)?;
            out.push(HeldOutView {
                latent_item: li,
                class_id: item.class as u32,
                image: ImagePatchGrid::from_blob(&g.to_blob(), spec.image_size, spec.patch_size)?,
            });
        }
    }
    Ok(out)
}

/// Generates the catalog, the click logs and the latent labels.
/// Deterministic in `spec.seed`.
pub fn generate_synthetic_logs(spec: &SyntheticCatalogSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size;
    let world = World::new(spec, &mut rng);
    let items = &world.items;
    let pool = (spec.pool_start() as u32)..(spec.vocab_size as u32);

    let vocab = Vocab::new(spec.vocab_size)?;
    let mut catalog = Vec::new();
    let mut truth = GroundTruth::default();
    let mut grids: Vec<Vec<ImagePatchGrid>> = Vec::new();
    for (li, item) in items.iter().enumerate() {
        let n_images = rng.random_range(spec.images_per_item.0..=spec.images_per_item.1);
        let views: Vec<Vec<f64>> = (0..n_images).map(|_| blob_pattern(&mut rng, size, 1)).collect();
        let copies = if rng.random_bool(spec.twin_fraction) { 2 } else { 1 };
        for _ in 0..copies {
            let mut imgs = Vec::with_capacity(n_images);
            for v in &views {
                let px = world.render(spec, &mut rng, item, v);
                // Round-trip through the 8-bit encoding so the in-memory
                // grids match what readers of the catalog file decode.
                let g = ImagePatchGrid::new(size, spec.patch_size, px)?;
                imgs.push(ImagePatchGrid::from_blob(&g.to_blob(), size, spec.patch_size)?);
            }
            let mut words = item.tokens.clone();
            words.shuffle(&mut rng);
            let filler = rng.random_range(0..=2);
            for _ in 0..filler {
                let pos = rng.random_range(0..=words.len());
                words.insert(pos, rng.random_range(pool.clone()));
            }
            let title = words.iter().map(|w| vocab.word(*w)).collect::<Vec<_>>().join(" ");
            let pid = catalog.len();
            catalog.push(ProductRecord {
                product_id: format!("p{pid:05}"),
                title,
                images: imgs.iter().map(ImagePatchGrid::to_blob).collect(),
                category: item.class as u32,
                available: true,
                popularity: rng.random_range(0.0..1.0),
            });
            truth.latent_item.push(li);
            truth.class_of.push(item.class as u32);
            grids.push(imgs);
        }
    }

    let n_logs = catalog.len() * spec.triplets_per_item;
    let relations = relation_schedule(&spec.relation_mix, n_logs, &mut rng);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); spec.classes];
    for (p, c) in truth.class_of.iter().enumerate() {
        by_class[*c as usize].push(p);
    }
    let mut logs = Vec::with_capacity(n_logs);
    for (i, relation) in relations.into_iter().enumerate() {
        let product = i % catalog.len();
        let class = truth.class_of[product] as usize;
        let source = match relation {
            Relation::Identical => product,
            Relation::Similar => {
                let others: Vec<usize> = by_class[class]
                    .iter()
                    .copied()
                    .filter(|p| truth.latent_item[*p] != truth.latent_item[product])
                    .collect();
                *others.choose(&mut rng).unwrap_or(&product)
            }
            Relation::Noise => {
                let c = rng.random_range(0..spec.classes);
                *by_class[c].choose(&mut rng).expect("class has items")
            }
        };
        let query_image = grids[source].choose(&mut rng).expect("items have images").clone();
        logs.push(ClickLogTriplet {
            query_image,
            clicked_title: vocab.tokenize(&catalog[product].title, spec.max_title_len),
            clicked_images: grids[product].clone(),
            class_id: class as u32,
            relation,
            product,
        });
    }
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        catalog,
        logs,
        truth,
    })
}

/// Exact relation counts by largest remainder, in shuffled order.
fn relation_schedule(mix: &[f64; 3], n: usize, rng: &mut ChaCha8Rng) -> Vec<Relation> {
    let kinds = [Relation::Identical, Relation::Similar, Relation::Noise];
    let raw: Vec<f64> = mix.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|a, b| (raw[*b] - raw[*b].floor()).total_cmp(&(raw[*a] - raw[*a].floor())));
    let mut left = n - counts.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    let mut out: Vec<Relation> = kinds
        .iter()
        .zip(&counts)
        .flat_map(|(k, c)| std::iter::repeat_n(*k, *c))
        .collect();
    out.shuffle(rng);
    out
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    product_id: String,
    relation: Relation,
    class_id: u32,
    query_image: ImageBlob,
}

impl SyntheticCorpus {
    /// Writes `catalog.jsonl`, `logs.jsonl`, `truth.json` and `spec.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_catalog(&dir.join("catalog.jsonl"), &self.catalog)?;
        let mut logs = String::new();
        for t in &self.logs {
            let line = LogLine {
                product_id: self.catalog[t.product].product_id.clone(),
                relation: t.relation,
                class_id: t.class_id,
                query_image: t.query_image.to_blob(),
            };
            logs.push_str(&serde_json::to_string(&line)?);
            logs.push('\n');
        }
        fs::write(dir.join("logs.jsonl"), logs)?;
        fs::write(dir.join("truth.json"), serde_json::to_string(&self.truth)?)?;
        fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&self.spec)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec: SyntheticCatalogSpec = serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)?;
        let catalog = read_catalog(&dir.join("catalog.jsonl"))?;
        let truth: GroundTruth = serde_json::from_str(&fs::read_to_string(dir.join("truth.json"))?)?;
        let vocab = Vocab::new(spec.vocab_size)?;
        let (size, patch) = (spec.image_size, spec.patch_size);
        let index: std::collections::HashMap<&str, usize> = catalog
            .iter()
            .enumerate()
            .map(|(i, r)| (r.product_id.as_str(), i))
            .collect();
        let mut grids = Vec::with_capacity(catalog.len());
        for r in &catalog {
            let g: Result<Vec<_>> = r.images.iter().map(|b| ImagePatchGrid::from_blob(b, size, patch)).collect();
            grids.push(g?);
        }
        let mut logs = Vec::new();
        for line in fs::read_to_string(dir.join("logs.jsonl"))?.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let l: LogLine = serde_json::from_str(line)?;
            let product = *index
                .get(l.product_id.as_str())
                .ok_or_else(|| Error::Consistency(format!("log references unknown product {}", l.product_id)))?;
            logs.push(ClickLogTriplet {
                query_image: ImagePatchGrid::from_blob(&l.query_image, size, patch)?,
                clicked_title: vocab.tokenize(&catalog[product].title, spec.max_title_len),
                clicked_images: grids[product].clone(),
                class_id: l.class_id,
                relation: l.relation,
                product,
            });
        }
        Ok(Self {
            spec,
            catalog,
            logs,
            truth,
        })
    }
}
