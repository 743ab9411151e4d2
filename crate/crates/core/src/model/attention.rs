//! Multi-head scaled dot-product attention, the position-wise feed-forward
//! network and the residual block built from them.

use alloc::vec::Vec;

use super::params::{AttentionParams, BlockParams, FeedForwardParams, NormParams};
use super::Forward;
use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::Scalar;

const LAYER_NORM_EPS: f64 = 1e-6;

pub struct AttentionOutput {
    /// q×d result after the output projection.
    pub output: Var,
    /// Per-head q×k attention weights.
    pub head_weights: Vec<Var>,
}

/// Attention of `queries` (q×d) over `keys_values` (k×d). `key_mask[j]` is
/// true for keys that may be attended to; `None` keeps every key.
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<'_, S>,
    queries: Var,
    keys_values: Var,
    key_mask: Option<&[bool]>,
    params: &AttentionParams,
    fw: &Forward<'_>,
    n_heads: usize,
) -> Result<AttentionOutput> {
    let (_, d) = tape.value(queries).dims2("multi_head_attention")?;
    let (k, d_kv) = tape.value(keys_values).dims2("multi_head_attention")?;
    if d != d_kv || n_heads == 0 || d % n_heads != 0 {
        return Err(shape_err!("multi_head_attention", "width {d} vs {d_kv} with {n_heads} heads"));
    }
    if let Some(mask) = key_mask {
        if mask.len() != k {
            return Err(shape_err!("multi_head_attention", "mask of length {} for {k} keys", mask.len()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllKeysMasked { row: 0 });
        }
    }
    let q = tape.matmul(queries, fw.var(params.wq))?;
    let kk = tape.matmul(keys_values, fw.var(params.wk))?;
    let v = tape.matmul(keys_values, fw.var(params.wv))?;
    let dk = d / n_heads;
    let scale = S::of(1.0 / libm::sqrt(dk as f64));
    let mut heads = Vec::with_capacity(n_heads);
    let mut head_weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let (qh, kh, vh) = if n_heads == 1 {
            (q, kk, v)
        } else {
            (tape.slice_cols(q, lo, hi)?, tape.slice_cols(kk, lo, hi)?, tape.slice_cols(v, lo, hi)?)
        };
        let scores = tape.matmul_bt(qh, kh)?;
        let mut scores = tape.scale(scores, scale)?;
        if let Some(mask) = key_mask {
            if mask.iter().any(|&m| !m) {
                scores = tape.masked_fill(scores, mask)?;
            }
        }
        let weights = tape.softmax_rows(scores)?;
        head_weights.push(weights);
        heads.push(tape.matmul(weights, vh)?);
    }
    let joined = if n_heads == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let output = tape.matmul(joined, fw.var(params.wo))?;
    Ok(AttentionOutput { output, head_weights })
}

/// `ReLU(x·W₁ + b₁)·W₂ + b₂`.
pub fn feed_forward<S: Scalar>(
    tape: &mut Tape<'_, S>,
    x: Var,
    params: &FeedForwardParams,
    fw: &Forward<'_>,
) -> Result<Var> {
    let h = tape.matmul(x, fw.var(params.w1))?;
    let h = tape.add_row(h, fw.var(params.b1))?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, fw.var(params.w2))?;
    tape.add_row(o, fw.var(params.b2))
}

fn norm<S: Scalar>(tape: &mut Tape<'_, S>, x: Var, params: Option<&NormParams>, fw: &Forward<'_>) -> Result<Var> {
    match params {
        None => Ok(x),
        Some(p) => {
            let n = tape.layer_norm(x, S::of(LAYER_NORM_EPS))?;
            let g = tape.mul_row(n, fw.var(p.gain))?;
            tape.add_row(g, fw.var(p.bias))
        }
    }
}

/// `m = x + MHA(x, kv)`, `out = m + PFF(m)`, with dropout on both branch
/// outputs and an optional layer norm after each residual add.
pub fn residual_block<S: Scalar>(
    tape: &mut Tape<'_, S>,
    x: Var,
    keys_values: Var,
    key_mask: Option<&[bool]>,
    params: &BlockParams,
    fw: &mut Forward<'_>,
    n_heads: usize,
) -> Result<Var> {
    let att = multi_head_attention(tape, x, keys_values, key_mask, &params.attention, fw, n_heads)?;
    let a = fw.dropout(tape, att.output)?;
    let m = tape.add(x, a)?;
    let m = norm(tape, m, params.norm1.as_ref(), fw)?;
    let f = feed_forward(tape, m, &params.ffn, fw)?;
    let f = fw.dropout(tape, f)?;
    let out = tape.add(m, f)?;
    norm(tape, out, params.norm2.as_ref(), fw)
}
