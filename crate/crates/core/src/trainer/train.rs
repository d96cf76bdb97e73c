use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adamw::{adamw_step_store, AdamWConfig, AdamWState};
use super::synth::{ClickLogTriplet, Relation};
use crate::error::{domain_err, Error, Result};
use crate::losses::{am_info_nce_on, class_based_batches, final_loss, FusedViews, LossConfig, XbmBuffer};
use crate::numcore::{grad_check_with, GradCheckReport, Tape, Var};
use crate::towers::{pad_or_truncate, TitleTokens, TowerModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// 1: query/title alignment, 2: fusion with one image, 3: fusion with K.
    pub stage: u8,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub k: usize,
    pub loss: LossConfig,
    pub seed: u64,
    /// Leave out triplets whose query came from an unrelated class.
    pub drop_noise: bool,
    /// Run a stage even if the model has not completed the previous one.
    pub allow_stage_skip: bool,
}

impl TrainConfig {
    /// Defaults for `stage`, with 20/30/10 epochs and a learning rate of
    /// 1e-3 for stage 1 and 1e-4 after it.
    pub fn for_stage(stage: u8) -> Self {
        let loss = LossConfig::default();
        Self {
            stage,
            optimizer: AdamWConfig {
                lr: if stage == 1 { 1e-3 } else { 1e-4 },
                ..AdamWConfig::default()
            },
            batch_size: loss.batch_size,
            epochs: match stage {
                1 => 20,
                2 => 30,
                _ => 10,
            },
            k: 4,
            loss,
            seed: 0,
            drop_noise: false,
            allow_stage_skip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(domain_err!("stage must be 1, 2 or 3, got {}", self.stage));
        }
        if self.stage == 3 && self.k < 2 {
            return Err(domain_err!("stage 3 needs K > 1, got {}", self.k));
        }
        if self.batch_size < 2 {
            return Err(domain_err!("batch size must be >= 2"));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    pub fn losses(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.loss).collect()
    }

    pub fn extend(&mut self, other: &LossCurve) {
        self.points.extend_from_slice(&other.points);
    }

    /// Mean loss over the first and last `n` steps.
    pub fn head_tail_means(&self, n: usize) -> (f64, f64) {
        let l = self.losses();
        let n = n.clamp(1, l.len().max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(&l[..n.min(l.len())]), mean(&l[l.len().saturating_sub(n)..]))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,stage,loss\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.step, p.stage, p.loss);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Images the item tower sees for one triplet at `stage`, as slot/token
/// pairs on `tape`.
fn item_image_tokens(
    tape: &mut Tape,
    model: &TowerModel,
    t: &ClickLogTriplet,
    stage: u8,
    k: usize,
) -> Result<Vec<(usize, Var)>> {
    let mcfg = model.config();
    let chosen = if stage == 2 {
        t.clicked_images[..1].to_vec()
    } else {
        let (imgs, mask) = pad_or_truncate(&t.clicked_images, k, mcfg.image_size, mcfg.patch_size)?;
        imgs.into_iter()
            .zip(mask.flags().to_vec())
            .filter_map(|(g, valid)| valid.then_some(g))
            .collect()
    };
    let mut out = Vec::with_capacity(chosen.len());
    for (slot, g) in chosen.iter().enumerate() {
        out.push((slot, model.image_tokens_on(tape, g)?));
    }
    Ok(out)
}

/// The training objective of `stage` for one batch, recorded on `tape`.
///
/// Stage 1 is `L(Q, T)` between query embeddings and projected title
/// embeddings; stages 2 and 3 are the composite loss with cross-batch memory.
pub fn stage_loss(
    tape: &mut Tape,
    model: &TowerModel,
    batch: &[&ClickLogTriplet],
    stage: u8,
    k: usize,
    xbm: &mut XbmBuffer,
    loss: &LossConfig,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(domain_err!("empty batch"));
    }
    if stage > 1 && model.config().k_images < k.max(1) {
        return Err(domain_err!("K = {k} exceeds the model's {} slots", model.config().k_images));
    }
    let mut queries = Vec::with_capacity(batch.len());
    for t in batch {
        queries.push(model.query_on(tape, &t.query_image)?);
    }
    let q = tape.concat_rows(&queries)?;
    if stage == 1 {
        let mut titles = Vec::with_capacity(batch.len());
        for t in batch {
            let toks = model.title_tokens_on(tape, &t.clicked_title)?;
            titles.push(model.title_embedding_on(tape, toks)?);
        }
        let tv = tape.concat_rows(&titles)?;
        return am_info_nce_on(tape, q, tv, loss);
    }
    let empty_title = TitleTokens::empty(model.config().max_title_len);
    let bare = model.title_tokens_on(tape, &empty_title)?;
    let (mut full, mut no_image, mut no_title) = (Vec::new(), Vec::new(), Vec::new());
    for t in batch {
        if t.clicked_images.is_empty() {
            return Err(domain_err!("triplet without clicked images"));
        }
        let title = model.title_tokens_on(tape, &t.clicked_title)?;
        let imgs = item_image_tokens(tape, model, t, stage, k)?;
        let tmask = t.clicked_title.mask();
        full.push(model.fuse_on(tape, title, &tmask, &imgs)?);
        no_image.push(model.fuse_on(tape, title, &tmask, &[])?);
        no_title.push(model.fuse_on(tape, bare, &empty_title.mask(), &imgs)?);
    }
    let views = FusedViews {
        full: tape.concat_rows(&full)?,
        no_image: tape.concat_rows(&no_image)?,
        no_title: tape.concat_rows(&no_title)?,
    };
    let labels: Vec<u32> = batch.iter().map(|t| t.class_id).collect();
    final_loss(tape, q, &views, &labels, xbm, loss)
}

/// Runs one curriculum stage over `logs`, updating `model` in place.
///
/// Optimizer state and cross-batch memory start empty. Leaving stage 1
/// initializes the fusion projection from the title projection. Stage `n > 1`
/// requires a model that completed stage `n - 1` unless
/// `cfg.allow_stage_skip` is set.
pub fn train_stage(model: &mut TowerModel, logs: &[ClickLogTriplet], cfg: &TrainConfig) -> Result<LossCurve> {
    cfg.validate()?;
    let stage = cfg.stage;
    if stage > 1 && model.trained_stage() + 1 < stage && !cfg.allow_stage_skip {
        return Err(Error::State(format!(
            "stage {stage} needs a stage {} checkpoint; model has completed stage {}",
            stage - 1,
            model.trained_stage()
        )));
    }
    if stage == 3 && cfg.k != model.config().k_images {
        return Err(domain_err!("K = {} but the model has {} image slots", cfg.k, model.config().k_images));
    }
    if stage > 1 && model.trained_stage() == 1 {
        model.init_fusion_from_title();
    }
    let data: Vec<&ClickLogTriplet> = logs
        .iter()
        .filter(|t| !(cfg.drop_noise && t.relation == Relation::Noise))
        .collect();
    if data.is_empty() {
        return Err(domain_err!("no training triplets"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut xbm = XbmBuffer::new(cfg.loss.xbm_capacity);
    let mut opt = AdamWState::default();
    let labels: Vec<u32> = data.iter().map(|t| t.class_id).collect();
    let mut curve = LossCurve::default();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let batches: Vec<Vec<usize>> = if stage == 1 {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
        } else {
            class_based_batches(&labels, cfg.batch_size, &mut rng)?
                .into_iter()
                .map(|b| b.indices)
                .collect()
        };
        for idx in batches {
            let batch: Vec<&ClickLogTriplet> = idx.iter().map(|i| data[*i]).collect();
            let mut tape = Tape::new();
            let l = stage_loss(&mut tape, model, &batch, stage, cfg.k, &mut xbm, &cfg.loss)?;
            let value = tape.scalar(l);
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss became {value} at step {step}")));
            }
            tape.backward(l)?;
            let store = model.params_mut();
            store.zero_grads();
            tape.accumulate_param_grads(store);
            adamw_step_store(store, &mut opt, &cfg.optimizer)?;
            curve.points.push(LossPoint { step, stage, loss: value });
            step += 1;
        }
    }
    model.set_trained_stage(model.trained_stage().max(stage));
    Ok(curve)
}

/// Compares the analytic gradient of [`stage_loss`] with respect to the
/// model parameters against central differences on `coords_per_param`
/// random coordinates of every parameter tensor.
///
/// Coordinates whose analytic gradient is at roundoff level are skipped:
/// attention key biases, for one, have an identically zero gradient since
/// softmax ignores a per-row shift.
///
/// Stage, `K`, loss settings and the coordinate-sampling seed come from
/// `cfg`.
pub fn stage_grad_check(
    model: &TowerModel,
    batch: &[&ClickLogTriplet],
    xbm: &XbmBuffer,
    cfg: &TrainConfig,
    coords_per_param: usize,
    eps: f64,
) -> Result<GradCheckReport> {
    let (stage, k, loss) = (cfg.stage, cfg.k, &cfg.loss);
    let mut work = model.clone();
    let mut tape = Tape::new();
    let l = stage_loss(&mut tape, &work, batch, stage, k, &mut xbm.clone(), loss)?;
    tape.backward(l)?;
    work.params_mut().zero_grads();
    tape.accumulate_param_grads(work.params_mut());
    let analytic = work.params().flat_grads();
    let x = work.params().flat_values();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coords = Vec::new();
    let mut offset = 0;
    for (_, _, t) in model.params().iter() {
        let n = t.len();
        let touched: Vec<usize> = (offset..offset + n).filter(|c| analytic[*c].abs() > 1e-9).collect();
        for _ in 0..coords_per_param.min(touched.len()) {
            coords.push(touched[rng.random_range(0..touched.len())]);
        }
        offset += n;
    }
    coords.sort_unstable();
    coords.dedup();

    let mut f = |values: &[f64]| -> Result<f64> {
        work.params_mut().set_flat_values(values)?;
        let mut tape = Tape::new();
        let l = stage_loss(&mut tape, &work, batch, stage, k, &mut xbm.clone(), loss)?;
        Ok(tape.scalar(l))
    };
    grad_check_with(&mut f, &x, &analytic, &coords, eps)
}
