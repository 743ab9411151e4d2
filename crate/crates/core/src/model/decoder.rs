use alloc::vec::Vec;

use super::attention::residual_block;
use super::{DecoderAttention, Forward, ModelParams};
use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::Scalar;

/// Label-to-token decoder. Starts from the final label embeddings `vt`
/// (L×d) and applies one residual attention block per decoder layer over
/// the matching encoder output. Returns the output of every decoder layer.
pub fn decode_features<S: Scalar>(
    tape: &mut Tape<'_, S>,
    params: &ModelParams<S>,
    fw: &mut Forward<'_>,
    vt: Var,
    encoder_outputs: &[Var],
    mask: &[bool],
) -> Result<Vec<Var>> {
    let cfg = &params.config;
    let n_enc = encoder_outputs.len();
    if n_enc == 0 || (cfg.decoder_attention == DecoderAttention::Aligned && n_enc != cfg.n_dec_layers) {
        return Err(shape_err!("decode_features", "{} encoder outputs for {} decoder layers", n_enc, cfg.n_dec_layers));
    }
    let mut u = vt;
    let mut outputs = Vec::with_capacity(cfg.n_dec_layers);
    for (l, block) in params.layout.decoder.iter().enumerate() {
        let z = match cfg.decoder_attention {
            DecoderAttention::Aligned => encoder_outputs[l],
            DecoderAttention::Final => encoder_outputs[n_enc - 1],
        };
        u = residual_block(tape, u, z, Some(mask), block, fw, cfg.n_heads)?;
        outputs.push(u);
    }
    Ok(outputs)
}
