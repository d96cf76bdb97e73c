//! Contrastive objectives: InfoNCE, the additive-margin variant, the
//! modality-balance auxiliary loss and the composite training loss with
//! cross-batch memory.
//!
//! All losses take anchors and candidates as rows of tape variables. Row `i`
//! of the candidate matrix is the positive for anchor `i`; every other row is
//! a negative. Rows are L2-normalized before similarities are taken, so the
//! cosine reduces to a dot product.

mod sampler;
mod xbm;

pub use sampler::{class_based_batches, ClassBatch};
pub use xbm::{XbmBuffer, XbmEntry, XbmSide};

use crate::error::{domain_err, shape_err, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Hyperparameters of the additive-margin contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Logit scale.
    pub gamma: f64,
    /// Margin subtracted from the positive similarity.
    pub margin: f64,
    pub xbm_capacity: usize,
    pub batch_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 20.0,
            margin: 0.2,
            xbm_capacity: 1024,
            batch_size: 8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(domain_err!("gamma must be > 0, got {}", self.gamma));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(domain_err!("margin must be in [0, 1), got {}", self.margin));
        }
        Ok(())
    }
}

/// Paired query and item embeddings with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub query_embs: Vec<Vec<f64>>,
    pub item_embs: Vec<Vec<f64>>,
    pub class_ids: Vec<u32>,
}

impl ContrastiveBatch {
    pub fn new(query_embs: Vec<Vec<f64>>, item_embs: Vec<Vec<f64>>, class_ids: Vec<u32>) -> Result<Self> {
        let b = Self {
            query_embs,
            item_embs,
            class_ids,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.query_embs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_embs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.query_embs.len();
        if n == 0 {
            return Err(domain_err!("empty contrastive batch"));
        }
        if self.item_embs.len() != n || self.class_ids.len() != n {
            return Err(shape_err!(
                "batch counts differ: {} queries, {} items, {} labels",
                n,
                self.item_embs.len(),
                self.class_ids.len()
            ));
        }
        let dim = self.query_embs[0].len();
        for v in self.query_embs.iter().chain(&self.item_embs) {
            if v.len() != dim {
                return Err(shape_err!("embedding dims differ"));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(domain_err!("embedding norm {norm} is not 1"));
            }
        }
        Ok(())
    }

    pub fn queries(&self) -> Tensor {
        Tensor::from_rows(&self.query_embs).expect("validated")
    }

    pub fn items(&self) -> Tensor {
        Tensor::from_rows(&self.item_embs).expect("validated")
    }
}

fn check_pair(tape: &Tape, anchors: Var, candidates: Var) -> Result<usize> {
    let (a, c) = (tape.value(anchors), tape.value(candidates));
    let n = a.rows();
    if n == 0 || a.is_empty() {
        return Err(domain_err!("empty batch"));
    }
    if c.cols() != a.cols() {
        return Err(shape_err!("anchor dim {} vs candidate dim {}", a.cols(), c.cols()));
    }
    if c.rows() < n {
        return Err(shape_err!("{} candidates for {} anchors", c.rows(), n));
    }
    Ok(n)
}

/// InfoNCE: `-mean_i log(e^{s(a_i, c_i)} / sum_j e^{s(a_i, c_j)})`.
pub fn info_nce_on(tape: &mut Tape, anchors: Var, candidates: Var) -> Result<Var> {
    let n = check_pair(tape, anchors, candidates)?;
    let a = tape.l2_normalize_rows(anchors);
    let c = tape.l2_normalize_rows(candidates);
    let logits = tape.matmul_nt(a, c)?;
    let targets: Vec<usize> = (0..n).collect();
    tape.cross_entropy_rows(logits, &targets)
}

/// Additive-margin InfoNCE: the positive logit is `gamma * (s - m)`, every
/// negative logit `gamma * s`.
pub fn am_info_nce_on(tape: &mut Tape, anchors: Var, candidates: Var, cfg: &LossConfig) -> Result<Var> {
    check_pair(tape, anchors, candidates)?;
    let a = tape.l2_normalize_rows(anchors);
    let c = tape.l2_normalize_rows(candidates);
    let sims = tape.matmul_nt(a, c)?;
    am_info_nce_from_sims(tape, sims, cfg)
}

/// Additive-margin InfoNCE over a precomputed `n x m` similarity matrix
/// (`m >= n`) whose diagonal holds the positives.
pub fn am_info_nce_from_sims(tape: &mut Tape, sims: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let (n, m) = (tape.value(sims).rows(), tape.value(sims).cols());
    if n == 0 || m < n {
        return Err(shape_err!("similarity matrix {n}x{m} needs m >= n >= 1"));
    }
    let scaled = tape.scale(sims, cfg.gamma);
    let mut shift = Tensor::zeros(vec![n, m]);
    let offset = -cfg.gamma * cfg.margin;
    for i in 0..n {
        shift.data_mut()[i * m + i] = offset;
    }
    let logits = tape.add_const(scaled, &shift)?;
    let targets: Vec<usize> = (0..n).collect();
    tape.cross_entropy_rows(logits, &targets)
}

/// InfoNCE of a batch (queries as anchors, items as candidates).
pub fn info_nce(batch: &ContrastiveBatch) -> Result<f64> {
    batch.validate()?;
    let mut tape = Tape::new();
    let q = tape.constant(batch.queries());
    let t = tape.constant(batch.items());
    let l = info_nce_on(&mut tape, q, t)?;
    Ok(tape.scalar(l))
}

/// Additive-margin InfoNCE of a batch (queries as anchors).
pub fn am_info_nce(batch: &ContrastiveBatch, cfg: &LossConfig) -> Result<f64> {
    batch.validate()?;
    let mut tape = Tape::new();
    let q = tape.constant(batch.queries());
    let t = tape.constant(batch.items());
    let l = am_info_nce_on(&mut tape, q, t, cfg)?;
    Ok(tape.scalar(l))
}

/// The three fusion outputs the composite loss needs, one row per sample.
#[derive(Debug, Clone, Copy)]
pub struct FusedViews {
    /// `F(I, T)`
    pub full: Var,
    /// `F(I_def, T)`: every image slot masked.
    pub no_image: Var,
    /// `F(I, T_def)`: every title token masked.
    pub no_title: Var,
}

/// `L(Q, F(I_def,T)) + L(Q, F(I,T_def)) + L(F(I_def,T), Q) + L(F(I,T_def), Q)`
pub fn modality_balance_loss(tape: &mut Tape, queries: Var, views: &FusedViews, cfg: &LossConfig) -> Result<Var> {
    let a = am_info_nce_on(tape, queries, views.no_image, cfg)?;
    let b = am_info_nce_on(tape, queries, views.no_title, cfg)?;
    let c = am_info_nce_on(tape, views.no_image, queries, cfg)?;
    let d = am_info_nce_on(tape, views.no_title, queries, cfg)?;
    tape.sum_scalars(&[a, b, c, d])
}

/// Composite training objective:
///
/// `L(Q,F) + L(F,Q) + L_balance + L(Q, F ∪ F_mem) + L(F, Q ∪ Q_mem)`
///
/// where the memory lanes of `xbm` supply extra (constant) negatives. The
/// current batch is enqueued into `xbm` after the loss is built.
pub fn final_loss(
    tape: &mut Tape,
    queries: Var,
    views: &FusedViews,
    class_ids: &[u32],
    xbm: &mut XbmBuffer,
    cfg: &LossConfig,
) -> Result<Var> {
    let n = tape.value(queries).rows();
    if class_ids.len() != n {
        return Err(shape_err!("{} labels for {} samples", class_ids.len(), n));
    }
    let qf = am_info_nce_on(tape, queries, views.full, cfg)?;
    let fq = am_info_nce_on(tape, views.full, queries, cfg)?;
    let balance = modality_balance_loss(tape, queries, views, cfg)?;

    let fused_now = normalized_rows(tape.value(views.full));
    let queries_now = normalized_rows(tape.value(queries));
    let fusion_mem = xbm.push_and_negatives(&fused_now, class_ids, XbmSide::Fusion)?;
    let query_mem = xbm.push_and_negatives(&queries_now, class_ids, XbmSide::Query)?;

    let q_mem = with_memory(tape, views.full, &fusion_mem)?;
    let q_mem_loss = am_info_nce_on(tape, queries, q_mem, cfg)?;
    let f_mem = with_memory(tape, queries, &query_mem)?;
    let f_mem_loss = am_info_nce_on(tape, views.full, f_mem, cfg)?;
    tape.sum_scalars(&[qf, fq, balance, q_mem_loss, f_mem_loss])
}

fn normalized_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_rows()
        .into_iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            r.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

fn with_memory(tape: &mut Tape, batch: Var, memory: &[Vec<f64>]) -> Result<Var> {
    if memory.is_empty() {
        return Ok(batch);
    }
    let mem = tape.constant(Tensor::from_rows(memory)?);
    tape.concat_rows(&[batch, mem])
}
