use alloc::vec::Vec;

use super::attention::residual_block;
use super::{Forward, ModelParams};
use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::{Scalar, Tensor};

/// Sinusoidal position table, S×d.
pub fn positional_encoding<S: Scalar>(len: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let rate = libm::pow(10_000.0, (2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data.push(S::of(if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) }));
        }
    }
    Tensor::new([len, d], data).expect("table size matches its shape")
}

/// Encoder self-attention stack. `mask[s]` is true on real tokens; padded
/// positions are computed but never attended to. Returns one S×d output per
/// encoder layer.
pub fn encode<S: Scalar>(
    tape: &mut Tape<'_, S>,
    params: &ModelParams<S>,
    fw: &mut Forward<'_>,
    tokens: &[usize],
    mask: &[bool],
) -> Result<Vec<Var>> {
    let cfg = &params.config;
    if tokens.len() != mask.len() {
        return Err(shape_err!("encode", "{} tokens with a mask of length {}", tokens.len(), mask.len()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::InvalidArgument(alloc::format!(
            "sequence of length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    let emb = tape.embedding(fw.var(params.layout.token_embeddings), tokens)?;
    let mut x = tape.scale(emb, S::of(libm::sqrt(cfg.d_model as f64)))?;
    if cfg.positional_encoding {
        let pe = tape.constant(positional_encoding(tokens.len(), cfg.d_model));
        x = tape.add(x, pe)?;
    }
    x = fw.dropout(tape, x)?;
    let key_mask = Some(mask);
    let mut outputs = Vec::with_capacity(cfg.n_enc_layers);
    for block in &params.layout.encoder {
        x = residual_block(tape, x, x, key_mask, block, fw, cfg.n_heads)?;
        outputs.push(x);
    }
    Ok(outputs)
}
