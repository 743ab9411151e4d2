//! The network: token encoder, multi-relation label-embedding module,
//! label-feature decoder and the voting prediction head.

mod attention;
mod config;
mod decoder;
mod encoder;
mod head;
mod params;
mod relation;

pub use attention::{feed_forward, multi_head_attention, residual_block, AttentionOutput};
pub use config::{DecoderAttention, ModelConfig, RelationActivation};
pub use decoder::decode_features;
pub use encoder::{encode, positional_encoding};
pub use head::{predict, vote_logits};
pub use params::{
    AttentionParams, BlockParams, Bound, FeedForwardParams, Layout, ModelParams, NormParams, ParamId,
    RelationModuleParams,
};
pub use relation::{relation_forward, RelationGraphTensors, RelationOutput};

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::Scalar;

/// SplitMix64 finalizer, used to derive independent dropout seeds.
pub fn mix_seed(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-pass context: bound parameter variables plus the dropout policy.
/// Each dropout site draws the next seed of a deterministic stream.
pub struct Forward<'b> {
    bound: &'b Bound,
    training: bool,
    dropout: f64,
    seed: u64,
    counter: u64,
}

impl<'b> Forward<'b> {
    pub fn inference(bound: &'b Bound) -> Self {
        Self { bound, training: false, dropout: 0.0, seed: 0, counter: 0 }
    }

    pub fn training(bound: &'b Bound, dropout: f64, seed: u64) -> Self {
        Self { bound, training: true, dropout, seed, counter: 0 }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn dropout<S: Scalar>(&mut self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        if !self.training || self.dropout == 0.0 {
            return Ok(x);
        }
        self.counter += 1;
        let seed = mix_seed(self.seed ^ mix_seed(self.counter));
        tape.dropout(x, self.dropout, true, seed)
    }
}

/// Encoder → decoder → head for one instance. `vt` is the final label
/// embedding matrix (L×d), already on `tape`. Returns the L×1 logits.
pub fn instance_logits<S: Scalar>(
    tape: &mut Tape<'_, S>,
    params: &ModelParams<S>,
    fw: &mut Forward<'_>,
    vt: Var,
    tokens: &[usize],
    mask: &[bool],
) -> Result<Var> {
    let z = encode(tape, params, fw, tokens, mask)?;
    let u = decode_features(tape, params, fw, vt, &z, mask)?;
    vote_logits(tape, &u, vt)
}
