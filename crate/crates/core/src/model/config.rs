use alloc::format;

use crate::error::{Error, Result};

/// Activation applied after each intermediate relation layer. The last layer
/// always uses ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationActivation {
    Relu,
    Identity,
}

/// Which encoder output each decoder layer attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderAttention {
    /// Decoder layer `l` reads encoder layer `l`.
    Aligned,
    /// Every decoder layer reads the last encoder layer.
    Final,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_rel_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub num_labels: usize,
    pub positional_encoding: bool,
    pub mrmp_enabled: bool,
    pub layer_norm: bool,
    pub relation_activation: RelationActivation,
    pub mean_aggregation: bool,
    pub decoder_attention: DecoderAttention,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            d_inner: 1024,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_rel_layers: 2,
            n_heads: 4,
            dropout: 0.1,
            max_seq_len: 500,
            vocab_size: 0,
            num_labels: 0,
            positional_encoding: false,
            mrmp_enabled: true,
            layer_norm: true,
            relation_activation: RelationActivation::Relu,
            mean_aggregation: false,
            decoder_attention: DecoderAttention::Aligned,
        }
    }
}

impl ModelConfig {
    /// Defaults with `d_inner = 2 · d_model`.
    pub fn with_dims(vocab_size: usize, num_labels: usize, d_model: usize) -> Self {
        Self { vocab_size, num_labels, d_model, d_inner: 2 * d_model, ..Self::default() }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d_model", self.d_model),
            ("d_inner", self.d_inner),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
            ("num_labels", self.num_labels),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.mrmp_enabled && self.n_rel_layers == 0 {
            return Err(Error::InvalidArgument("n_rel_layers must be positive when the relation module is on".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.decoder_attention == DecoderAttention::Aligned && self.n_dec_layers != self.n_enc_layers {
            return Err(Error::InvalidArgument(format!(
                "aligned decoder needs as many decoder layers as encoder layers ({} vs {})",
                self.n_dec_layers, self.n_enc_layers
            )));
        }
        Ok(())
    }
}
