use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::input::{ImagePatchGrid, ItemInput, TitleTokens};
use crate::error::{domain_err, shape_err, Result};
use crate::numcore::{linear, multi_head_attention, AttentionMask, AttentionParams, ParamId, ParamStore, Tape, Tensor, Var};

/// Unit-norm feature vector emitted by either tower.
pub type Embedding = Vec<f64>;

/// Model dimensions. The defaults are desk scale; [`TowerConfig::paper_scale`]
/// keeps the same topology at the published sizes (6 fusion layers, 128-d
/// output).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TowerConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub image_layers: usize,
    pub title_layers: usize,
    pub fusion_layers: usize,
    pub out_dim: usize,
    pub vocab_size: usize,
    pub max_title_len: usize,
    /// Image slots per item.
    pub k_images: usize,
    pub seed: u64,
}

impl Default for TowerConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            token_dim: 32,
            heads: 4,
            mlp_ratio: 2,
            image_layers: 1,
            title_layers: 1,
            fusion_layers: 2,
            out_dim: 32,
            vocab_size: 1024,
            max_title_len: 16,
            k_images: 4,
            seed: 0,
        }
    }
}

impl TowerConfig {
    pub fn paper_scale() -> Self {
        Self {
            token_dim: 128,
            heads: 8,
            mlp_ratio: 4,
            fusion_layers: 6,
            out_dim: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(shape_err!(
                "image size {} not divisible by patch size {}",
                self.image_size,
                self.patch_size
            ));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(shape_err!("token dim {} not divisible by {} heads", self.token_dim, self.heads));
        }
        if self.token_dim == 0 || self.out_dim == 0 || self.mlp_ratio == 0 {
            return Err(domain_err!("dimensions must be positive"));
        }
        if self.vocab_size < 3 || self.max_title_len == 0 || self.k_images == 0 {
            return Err(domain_err!("vocab >= 3, title length >= 1 and K >= 1 required"));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let s = self.image_size / self.patch_size;
        s * s
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_size, self.patch_size)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    ln1: (ParamId, ParamId),
    attn: AttentionParams,
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

/// Patch embedding, positional table and self-attention blocks over image
/// patches. One instance serves both towers.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    patch: (ParamId, ParamId),
    pos: ParamId,
    blocks: Vec<BlockParams>,
    ln: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TitleEncoder {
    tok: ParamId,
    pos: ParamId,
    cls: ParamId,
    blocks: Vec<BlockParams>,
    ln: (ParamId, ParamId),
}

/// Merge-attention layers over `[CLS + title tokens, image patches...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModule {
    title_type: ParamId,
    image_type: ParamId,
    /// One learned offset per image slot.
    slot: ParamId,
    blocks: Vec<BlockParams>,
    ln: (ParamId, ParamId),
}

/// All weights of the dual-tower model in a single [`ParamStore`].
#[derive(Debug, Clone)]
pub struct TowerModel {
    cfg: TowerConfig,
    store: ParamStore,
    image: ImageEncoder,
    title: TitleEncoder,
    fusion: FusionModule,
    image_proj: (ParamId, ParamId),
    title_proj: (ParamId, ParamId),
    fusion_proj: (ParamId, ParamId),
    trained_stage: u8,
}

/// Read-only view of the query side: image encoder plus image projection.
pub struct QueryTower<'a> {
    model: &'a TowerModel,
}

/// Read-only view of the item side: both encoders, fusion and projection.
pub struct ItemTower<'a> {
    model: &'a TowerModel,
}

impl QueryTower<'_> {
    pub fn image_encoder(&self) -> &ImageEncoder {
        &self.model.image
    }

    pub fn embed(&self, img: &ImagePatchGrid) -> Result<Embedding> {
        self.model.query_embedding(img)
    }
}

impl ItemTower<'_> {
    pub fn image_encoder(&self) -> &ImageEncoder {
        &self.model.image
    }

    pub fn embed(&self, item: &ItemInput) -> Result<Embedding> {
        self.model.item_embedding(item)
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        let d = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| d.sample(&mut self.rng)).collect();
        Tensor::matrix(rows, cols, data).expect("shape")
    }

    fn fill(rows: usize, cols: usize, v: f64) -> Tensor {
        Tensor::matrix(rows, cols, vec![v; rows * cols]).expect("shape")
    }
}

fn add_linear(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
    let w = store.add(
        format!("{name}.w"),
        init.normal(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt()),
    );
    let b = store.add(format!("{name}.b"), Init::fill(1, fan_out, 0.0));
    (w, b)
}

fn add_ln(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.g"), Init::fill(1, d, 1.0)),
        store.add(format!("{name}.b"), Init::fill(1, d, 0.0)),
    )
}

fn add_block(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &TowerConfig) -> BlockParams {
    let d = cfg.token_dim;
    let ln1 = add_ln(store, &format!("{name}.ln1"), d);
    let (wq, bq) = add_linear(store, init, &format!("{name}.attn.q"), d, d);
    let (wk, bk) = add_linear(store, init, &format!("{name}.attn.k"), d, d);
    let (wv, bv) = add_linear(store, init, &format!("{name}.attn.v"), d, d);
    let (wo, bo) = add_linear(store, init, &format!("{name}.attn.o"), d, d);
    let ln2 = add_ln(store, &format!("{name}.ln2"), d);
    let fc1 = add_linear(store, init, &format!("{name}.mlp.fc1"), d, d * cfg.mlp_ratio);
    let fc2 = add_linear(store, init, &format!("{name}.mlp.fc2"), d * cfg.mlp_ratio, d);
    BlockParams {
        ln1,
        attn: AttentionParams {
            heads: cfg.heads,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        },
        ln2,
        fc1,
        fc2,
    }
}

fn block_on(tape: &mut Tape, store: &ParamStore, b: &BlockParams, x: Var, mask: &AttentionMask) -> Result<Var> {
    let (g, bias) = (tape.param(store, b.ln1.0), tape.param(store, b.ln1.1));
    let h = tape.layer_norm(x, g, bias)?;
    let a = multi_head_attention(tape, store, &b.attn, h, h, mask)?;
    let x = tape.add(x, a)?;
    let (g, bias) = (tape.param(store, b.ln2.0), tape.param(store, b.ln2.1));
    let h = tape.layer_norm(x, g, bias)?;
    let h = linear(tape, store, h, b.fc1.0, b.fc1.1)?;
    let h = tape.gelu(h);
    let h = linear(tape, store, h, b.fc2.0, b.fc2.1)?;
    tape.add(x, h)
}

fn stack_on(
    tape: &mut Tape,
    store: &ParamStore,
    blocks: &[BlockParams],
    ln: (ParamId, ParamId),
    mut x: Var,
    mask: &AttentionMask,
) -> Result<Var> {
    for b in blocks {
        x = block_on(tape, store, b, x, mask)?;
    }
    let (g, bias) = (tape.param(store, ln.0), tape.param(store, ln.1));
    tape.layer_norm(x, g, bias)
}

impl TowerModel {
    /// Randomly initialized model; deterministic in `cfg.seed`.
    pub fn new(cfg: TowerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let mut store = ParamStore::new();
        let (d, np, p2) = (cfg.token_dim, cfg.num_patches(), cfg.patch_size * cfg.patch_size);

        let patch = add_linear(&mut store, &mut init, "image.patch", p2, d);
        let pos = store.add("image.pos", init.normal(np, d, 0.1));
        let blocks = (0..cfg.image_layers)
            .map(|i| add_block(&mut store, &mut init, &format!("image.block{i}"), &cfg))
            .collect();
        let ln = add_ln(&mut store, "image.ln", d);
        let image = ImageEncoder { patch, pos, blocks, ln };

        let tok = store.add("title.tok", init.normal(cfg.vocab_size, d, 1.0));
        let tpos = store.add("title.pos", init.normal(cfg.max_title_len + 1, d, 0.1));
        let cls = store.add("title.cls", init.normal(1, d, 0.5));
        let blocks = (0..cfg.title_layers)
            .map(|i| add_block(&mut store, &mut init, &format!("title.block{i}"), &cfg))
            .collect();
        let ln = add_ln(&mut store, "title.ln", d);
        let title = TitleEncoder {
            tok,
            pos: tpos,
            cls,
            blocks,
            ln,
        };

        let title_type = store.add("fusion.title_type", init.normal(1, d, 0.1));
        let image_type = store.add("fusion.image_type", init.normal(1, d, 0.1));
        let slot = store.add("fusion.slot", init.normal(cfg.k_images, d, 0.1));
        let blocks = (0..cfg.fusion_layers)
            .map(|i| add_block(&mut store, &mut init, &format!("fusion.block{i}"), &cfg))
            .collect();
        let ln = add_ln(&mut store, "fusion.ln", d);
        let fusion = FusionModule {
            title_type,
            image_type,
            slot,
            blocks,
            ln,
        };

        let image_proj = add_linear(&mut store, &mut init, "proj.image", d, cfg.out_dim);
        let title_proj = add_linear(&mut store, &mut init, "proj.title", d, cfg.out_dim);
        let fusion_proj = add_linear(&mut store, &mut init, "proj.fusion", d, cfg.out_dim);
        Ok(Self {
            cfg,
            store,
            image,
            title,
            fusion,
            image_proj,
            title_proj,
            fusion_proj,
            trained_stage: 0,
        })
    }

    pub fn config(&self) -> &TowerConfig {
        &self.cfg
    }

    /// Last curriculum stage completed (0 for a fresh model).
    pub fn trained_stage(&self) -> u8 {
        self.trained_stage
    }

    pub fn set_trained_stage(&mut self, stage: u8) {
        self.trained_stage = stage;
    }

    /// Copies the title projection into the fusion projection, so a fused
    /// embedding starts out close to the title embedding it extends.
    pub fn init_fusion_from_title(&mut self) {
        for (src, dst) in [(self.title_proj.0, self.fusion_proj.0), (self.title_proj.1, self.fusion_proj.1)] {
            let v = self.store.get(src).clone();
            *self.store.get_mut(dst) = v;
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn query_tower(&self) -> QueryTower<'_> {
        QueryTower { model: self }
    }

    pub fn item_tower(&self) -> ItemTower<'_> {
        ItemTower { model: self }
    }

    fn check_grid(&self, img: &ImagePatchGrid) -> Result<()> {
        if (img.size(), img.patch_size()) != self.cfg.grid() {
            return Err(shape_err!(
                "image {}x{} with {}-pixel patches, model expects {}x{} with {}",
                img.size(),
                img.size(),
                img.patch_size(),
                self.cfg.image_size,
                self.cfg.image_size,
                self.cfg.patch_size
            ));
        }
        Ok(())
    }

    /// Patch-level tokens of one image (`num_patches x token_dim`).
    pub fn image_tokens_on(&self, tape: &mut Tape, img: &ImagePatchGrid) -> Result<Var> {
        self.check_grid(img)?;
        let e = &self.image;
        let x = tape.constant(img.patch_matrix());
        let x = linear(tape, &self.store, x, e.patch.0, e.patch.1)?;
        let pos = tape.param(&self.store, e.pos);
        let x = tape.add(x, pos)?;
        let mask = AttentionMask::all_valid(self.cfg.num_patches());
        stack_on(tape, &self.store, &e.blocks, e.ln, x, &mask)
    }

    /// Mean of the patch tokens through the image projection, normalized.
    pub fn pooled_image_on(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        let m = tape.mean_rows(tokens)?;
        let p = linear(tape, &self.store, m, self.image_proj.0, self.image_proj.1)?;
        Ok(tape.l2_normalize_rows(p))
    }

    pub fn query_on(&self, tape: &mut Tape, img: &ImagePatchGrid) -> Result<Var> {
        let t = self.image_tokens_on(tape, img)?;
        self.pooled_image_on(tape, t)
    }

    /// `(max_title_len + 1) x token_dim`; row 0 is the CLS position.
    pub fn title_tokens_on(&self, tape: &mut Tape, title: &TitleTokens) -> Result<Var> {
        if title.max_len() != self.cfg.max_title_len {
            return Err(shape_err!(
                "title length {} vs model {}",
                title.max_len(),
                self.cfg.max_title_len
            ));
        }
        if let Some(id) = title.ids().iter().find(|i| **i as usize >= self.cfg.vocab_size) {
            return Err(domain_err!("token id {id} outside vocabulary of {}", self.cfg.vocab_size));
        }
        let e = &self.title;
        let ids: Vec<usize> = title.padded().into_iter().map(|i| i as usize).collect();
        let table = tape.param(&self.store, e.tok);
        let toks = tape.gather_rows(table, &ids)?;
        let cls = tape.param(&self.store, e.cls);
        let x = tape.concat_rows(&[cls, toks])?;
        let pos = tape.param(&self.store, e.pos);
        let x = tape.add(x, pos)?;
        let mask = with_cls(&title.mask());
        stack_on(tape, &self.store, &e.blocks, e.ln, x, &mask)
    }

    /// CLS row through the title projection, normalized.
    pub fn title_embedding_on(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        let cls = tape.gather_rows(tokens, &[0])?;
        let p = linear(tape, &self.store, cls, self.title_proj.0, self.title_proj.1)?;
        Ok(tape.l2_normalize_rows(p))
    }

    /// Merge attention over the CLS-prefixed title tokens and the patch
    /// tokens of each image slot.
    ///
    /// `title_mask` covers the title positions after CLS. `images` pairs a
    /// slot index with its patch tokens; masked slots are simply left out,
    /// which is exactly equivalent to giving their tokens zero attention.
    pub fn fuse_on(
        &self,
        tape: &mut Tape,
        title_tokens: Var,
        title_mask: &AttentionMask,
        images: &[(usize, Var)],
    ) -> Result<Var> {
        let d = self.cfg.token_dim;
        let tt = tape.value(title_tokens);
        if tt.cols() != d || tt.rows() != title_mask.len() + 1 {
            return Err(shape_err!(
                "title tokens {}x{} for a mask of {}",
                tt.rows(),
                tt.cols(),
                title_mask.len()
            ));
        }
        let f = &self.fusion;
        let mut keep = vec![0];
        keep.extend(title_mask.valid_indices().into_iter().map(|i| i + 1));
        let t = tape.gather_rows(title_tokens, &keep)?;
        let ty = tape.param(&self.store, f.title_type);
        let mut parts = vec![tape.add_row(t, ty)?];
        if !images.is_empty() {
            let ity = tape.param(&self.store, f.image_type);
            let slots = tape.param(&self.store, f.slot);
            for &(slot, toks) in images {
                if slot >= self.cfg.k_images {
                    return Err(shape_err!("image slot {slot} >= K = {}", self.cfg.k_images));
                }
                if tape.value(toks).cols() != d {
                    return Err(shape_err!("image token dim {} vs {d}", tape.value(toks).cols()));
                }
                let x = tape.add_row(toks, ity)?;
                let off = tape.gather_rows(slots, &[slot])?;
                parts.push(tape.add_row(x, off)?);
            }
        }
        let seq = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)?
        };
        let mask = AttentionMask::all_valid(tape.value(seq).rows());
        let out = stack_on(tape, &self.store, &f.blocks, f.ln, seq, &mask)?;
        let cls = tape.gather_rows(out, &[0])?;
        let p = linear(tape, &self.store, cls, self.fusion_proj.0, self.fusion_proj.1)?;
        Ok(tape.l2_normalize_rows(p))
    }

    /// Item embedding on a tape: encodes the title and every unmasked image,
    /// then fuses.
    pub fn item_on(&self, tape: &mut Tape, item: &ItemInput) -> Result<Var> {
        if item.images.len() != self.cfg.k_images || item.image_mask.len() != self.cfg.k_images {
            return Err(shape_err!(
                "item has {} image slots, model expects K = {}",
                item.images.len(),
                self.cfg.k_images
            ));
        }
        let t = self.title_tokens_on(tape, &item.title)?;
        let mut imgs = Vec::new();
        for slot in item.image_mask.valid_indices() {
            imgs.push((slot, self.image_tokens_on(tape, &item.images[slot])?));
        }
        self.fuse_on(tape, t, &item.title.mask(), &imgs)
    }

    /// Patch tokens and pooled embedding of one image.
    pub fn encode_image(&self, img: &ImagePatchGrid) -> Result<(Tensor, Embedding)> {
        let mut tape = Tape::new();
        let t = self.image_tokens_on(&mut tape, img)?;
        let e = self.pooled_image_on(&mut tape, t)?;
        Ok((tape.value(t).clone(), tape.value(e).data().to_vec()))
    }

    /// Token sequence (CLS first) and the CLS row.
    pub fn encode_title(&self, title: &TitleTokens) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let t = self.title_tokens_on(&mut tape, title)?;
        let seq = tape.value(t).clone();
        let cls = seq.row_slice(0).to_vec();
        Ok((seq, cls))
    }

    /// Projected title embedding used for query/title alignment.
    pub fn title_embedding(&self, title: &TitleTokens) -> Result<Embedding> {
        let mut tape = Tape::new();
        let t = self.title_tokens_on(&mut tape, title)?;
        let e = self.title_embedding_on(&mut tape, t)?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Fused embedding from already encoded tokens. `image_tokens[k]` is
    /// ignored when `image_mask` marks slot `k` invalid.
    pub fn fuse_merge_attention(
        &self,
        image_tokens: &[Tensor],
        image_mask: &AttentionMask,
        title_tokens: &Tensor,
        title_mask: &AttentionMask,
    ) -> Result<Embedding> {
        if image_tokens.len() != image_mask.len() {
            return Err(shape_err!(
                "{} image token sets for a mask of {}",
                image_tokens.len(),
                image_mask.len()
            ));
        }
        let mut tape = Tape::new();
        let t = tape.constant(title_tokens.clone());
        let mut imgs = Vec::new();
        for slot in image_mask.valid_indices() {
            imgs.push((slot, tape.constant(image_tokens[slot].clone())));
        }
        let e = self.fuse_on(&mut tape, t, title_mask, &imgs)?;
        Ok(tape.value(e).data().to_vec())
    }

    pub fn item_embedding(&self, item: &ItemInput) -> Result<Embedding> {
        let mut tape = Tape::new();
        let e = self.item_on(&mut tape, item)?;
        Ok(tape.value(e).data().to_vec())
    }

    pub fn query_embedding(&self, img: &ImagePatchGrid) -> Result<Embedding> {
        let mut tape = Tape::new();
        let e = self.query_on(&mut tape, img)?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Embedding of a single `(image, title)` pair: the item tower with one
    /// image slot filled.
    pub fn pair_embedding(&self, img: &ImagePatchGrid, title: &TitleTokens) -> Result<Embedding> {
        let item = ItemInput::new(title.clone(), std::slice::from_ref(img), self.cfg.k_images, self.cfg.grid(), 0)?;
        self.item_embedding(&item)
    }

    pub(crate) fn from_parts(cfg: TowerConfig, values: Vec<(String, Tensor)>) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        if values.len() != m.store.len() {
            return Err(crate::Error::Format(format!(
                "checkpoint has {} arrays, model needs {}",
                values.len(),
                m.store.len()
            )));
        }
        for (id, (name, t)) in values.into_iter().enumerate() {
            if m.store.name(id) != name || m.store.get(id).shape() != t.shape() {
                return Err(crate::Error::Format(format!(
                    "array {id}: found {name} {:?}, expected {} {:?}",
                    t.shape(),
                    m.store.name(id),
                    m.store.get(id).shape()
                )));
            }
            m.store.get_mut(id).data_mut().copy_from_slice(t.data());
        }
        Ok(m)
    }
}

impl TowerModel {
    /// Fusion over the full padded sequence with key masking, without
    /// dropping masked tokens. Used to cross-check [`TowerModel::fuse_on`].
    #[cfg(test)]
    pub(super) fn fuse_masked_reference(&self, item: &ItemInput) -> Result<Embedding> {
        let mut tape = Tape::new();
        let f = &self.fusion;
        let t = self.title_tokens_on(&mut tape, &item.title)?;
        let ty = tape.param(&self.store, f.title_type);
        let mut parts = vec![tape.add_row(t, ty)?];
        let mut masks = vec![with_cls(&item.title.mask())];
        let ity = tape.param(&self.store, f.image_type);
        let slots = tape.param(&self.store, f.slot);
        for (k, img) in item.images.iter().enumerate() {
            let toks = self.image_tokens_on(&mut tape, img)?;
            let x = tape.add_row(toks, ity)?;
            let off = tape.gather_rows(slots, &[k])?;
            parts.push(tape.add_row(x, off)?);
            let valid = item.image_mask.is_valid(k);
            masks.push(AttentionMask::new(vec![valid; self.cfg.num_patches()]));
        }
        let seq = tape.concat_rows(&parts)?;
        let mask = AttentionMask::concat(&masks.iter().collect::<Vec<_>>());
        let out = stack_on(&mut tape, &self.store, &f.blocks, f.ln, seq, &mask)?;
        let cls = tape.gather_rows(out, &[0])?;
        let p = linear(&mut tape, &self.store, cls, self.fusion_proj.0, self.fusion_proj.1)?;
        let e = tape.l2_normalize_rows(p);
        Ok(tape.value(e).data().to_vec())
    }
}

fn with_cls(mask: &AttentionMask) -> AttentionMask {
    AttentionMask::concat(&[&AttentionMask::all_valid(1), mask])
}
