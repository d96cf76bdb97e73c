use super::kernels;
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::{AttentionMask, Tensor};
use crate::error::{domain_err, shape_err, Result};

/// `dot(a, b) / (|a| |b|)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err!("cosine of {}-d and {}-d vectors", a.len(), b.len()));
    }
    let na = kernels::dot(a, a).sqrt();
    let nb = kernels::dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(domain_err!("cosine similarity of a zero-norm vector"));
    }
    Ok((kernels::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Stable row-wise softmax.
pub fn softmax_rows(m: &Tensor) -> Tensor {
    let cols = m.cols();
    let mut out = m.clone();
    out.grad = None;
    out.requires_grad = false;
    for row in out.data_mut().chunks_mut(cols.max(1)) {
        kernels::softmax_in_place(row, None);
    }
    out
}

/// Weights of one multi-head attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

/// `x W + b` with `W: in x out`, `b: 1 x out`.
pub fn linear(tape: &mut Tape, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = tape.param(store, w);
    let b = tape.param(store, b);
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

/// Scaled dot-product attention of `q_tokens` over `kv_tokens`, split across
/// heads. Keys flagged invalid in `mask` get zero weight from every query.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    p: &AttentionParams,
    q_tokens: Var,
    kv_tokens: Var,
    mask: &AttentionMask,
) -> Result<Var> {
    let dim = tape.value(q_tokens).cols();
    if tape.value(kv_tokens).cols() != dim {
        return Err(shape_err!(
            "query dim {} vs key/value dim {}",
            dim,
            tape.value(kv_tokens).cols()
        ));
    }
    if p.heads == 0 || dim % p.heads != 0 {
        return Err(shape_err!("dim {} not divisible by {} heads", dim, p.heads));
    }
    if mask.len() != tape.value(kv_tokens).rows() {
        return Err(shape_err!(
            "mask length {} vs {} key tokens",
            mask.len(),
            tape.value(kv_tokens).rows()
        ));
    }
    let dh = dim / p.heads;
    let q = linear(tape, store, q_tokens, p.wq, p.bq)?;
    let k = linear(tape, store, kv_tokens, p.wk, p.bk)?;
    let v = linear(tape, store, kv_tokens, p.wv, p.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores, Some(mask))?;
        outs.push(tape.matmul(weights, vh)?);
    }
    let merged = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    linear(tape, store, merged, p.wo, p.bo)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_trivial_cases() {
        let v = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(crate::Error::Domain(_))
        ));
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        assert!(s.is_finite());
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-300);
        // ln2 vs 0: e^{ln 2} / (e^{ln 2} + 1) = 2/3, frozen by hand.
        let s = softmax_rows(&Tensor::from_rows(&[vec![std::f64::consts::LN_2, 0.0]]).unwrap());
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }
}
