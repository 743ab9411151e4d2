//! Named parameter storage and the fixed layout of every model weight.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::{Scalar, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Uniform in ±√(6 / (fan_in + fan_out)).
    Xavier,
    /// Normal with standard deviation 1/√d.
    Embedding,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Attention + position-wise feed-forward with residual adds; used by both
/// encoder (self-attention) and decoder (label-to-token attention) layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub attention: AttentionParams,
    pub norm1: Option<NormParams>,
    pub ffn: FeedForwardParams,
    pub norm2: Option<NormParams>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationModuleParams {
    /// Initial label embeddings, L×d.
    pub label_embeddings: ParamId,
    /// Initial pulling relation embedding, 1×d.
    pub relation_embedding: ParamId,
    pub w_pull: Vec<ParamId>,
    pub w_push: Vec<ParamId>,
    pub w_rel: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub token_embeddings: ParamId,
    pub encoder: Vec<BlockParams>,
    pub relation: RelationModuleParams,
    pub decoder: Vec<BlockParams>,
}

struct Spec {
    name: String,
    shape: [usize; 2],
    init: Init,
}

struct LayoutBuilder {
    specs: Vec<Spec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: [usize; 2], init: Init) -> ParamId {
        self.specs.push(Spec { name, shape, init });
        ParamId(self.specs.len() - 1)
    }

    fn block(&mut self, prefix: &str, config: &ModelConfig) -> BlockParams {
        let d = config.d_model;
        let attention = AttentionParams {
            wq: self.add(format!("{prefix}.attn.wq"), [d, d], Init::Xavier),
            wk: self.add(format!("{prefix}.attn.wk"), [d, d], Init::Xavier),
            wv: self.add(format!("{prefix}.attn.wv"), [d, d], Init::Xavier),
            wo: self.add(format!("{prefix}.attn.wo"), [d, d], Init::Xavier),
        };
        let norm1 = config.layer_norm.then(|| self.norm(&format!("{prefix}.norm1"), d));
        let ffn = FeedForwardParams {
            w1: self.add(format!("{prefix}.ffn.w1"), [d, config.d_inner], Init::Xavier),
            b1: self.add(format!("{prefix}.ffn.b1"), [1, config.d_inner], Init::Zeros),
            w2: self.add(format!("{prefix}.ffn.w2"), [config.d_inner, d], Init::Xavier),
            b2: self.add(format!("{prefix}.ffn.b2"), [1, d], Init::Zeros),
        };
        let norm2 = config.layer_norm.then(|| self.norm(&format!("{prefix}.norm2"), d));
        BlockParams { attention, norm1, ffn, norm2 }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormParams {
        NormParams {
            gain: self.add(format!("{prefix}.gain"), [1, d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), [1, d], Init::Zeros),
        }
    }
}

fn build_layout(config: &ModelConfig) -> (Layout, Vec<Spec>) {
    let d = config.d_model;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let token_embeddings = b.add("token_embeddings".into(), [config.vocab_size, d], Init::Embedding);
    let encoder = (0..config.n_enc_layers).map(|l| b.block(&format!("encoder.{l}"), config)).collect();
    let label_embeddings = b.add("relation.label_embeddings".into(), [config.num_labels, d], Init::Embedding);
    let relation_embedding = b.add("relation.relation_embedding".into(), [1, d], Init::Embedding);
    let mut w_pull = Vec::new();
    let mut w_push = Vec::new();
    for l in 0..config.n_rel_layers {
        w_pull.push(b.add(format!("relation.{l}.w_pull"), [d, d], Init::Xavier));
        w_push.push(b.add(format!("relation.{l}.w_push"), [d, d], Init::Xavier));
    }
    let w_rel = b.add("relation.w_rel".into(), [d, d], Init::Xavier);
    let relation = RelationModuleParams { label_embeddings, relation_embedding, w_pull, w_push, w_rel };
    let decoder = (0..config.n_dec_layers).map(|l| b.block(&format!("decoder.{l}"), config)).collect();
    (Layout { token_embeddings, encoder, relation, decoder }, b.specs)
}

/// Every trainable tensor of the network, in a fixed layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub config: ModelConfig,
    pub layout: Layout,
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ModelParams<S> {
    /// Deterministic initialization from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb_std = 1.0 / libm::sqrt(config.d_model as f64);
        let normal = Normal::new(0.0, emb_std).map_err(|e| Error::InvalidArgument(format!("{e:?}")))?;
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let [r, c] = spec.shape;
            let n = r * c;
            let data: Vec<S> = match spec.init {
                Init::Xavier => {
                    let a = libm::sqrt(6.0 / (r + c) as f64);
                    (0..n).map(|_| S::of(rng.random_range(-a..a))).collect()
                }
                Init::Embedding => (0..n).map(|_| S::of(normal.sample(&mut rng))).collect(),
                Init::Zeros => alloc::vec![S::zero(); n],
                Init::Ones => alloc::vec![S::one(); n],
            };
            names.push(spec.name);
            tensors.push(Tensor::new([r, c], data)?);
        }
        Ok(Self { config, layout, names, tensors })
    }

    /// Rebuilds parameters from named tensors, checking every name and shape
    /// against the layout implied by `config`.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<S>)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        if named.len() != specs.len() {
            return Err(shape_err!("load_params", "expected {} tensors, found {}", specs.len(), named.len()));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (spec, (name, tensor)) in specs.into_iter().zip(named) {
            if spec.name != name {
                return Err(shape_err!("load_params", "expected tensor {}, found {}", spec.name, name));
            }
            if tensor.shape() != spec.shape {
                return Err(shape_err!("load_params", "{}: expected {:?}, found {:?}", name, spec.shape, tensor.shape()));
            }
            names.push(name);
            tensors.push(tensor);
        }
        Ok(Self { config, layout, names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers every parameter as a borrowed, trainable leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, S>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t)).collect())
    }

    /// Registers every parameter as a borrowed constant (inference).
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a, S>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t, false)).collect())
    }
}

/// Tape variables of a bound [`ModelParams`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(pub(crate) Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { n_heads: 2, ..ModelConfig::with_dims(11, 5, 8) }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ModelParams::<f32>::init(small(), 3).unwrap();
        let b = ModelParams::<f32>::init(small(), 3).unwrap();
        let c = ModelParams::<f32>::init(small(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tensors(), c.tensors());
        assert_eq!(a.parameter_count(), c.parameter_count());
        assert!(a.tensors().iter().all(Tensor::all_finite));
    }

    #[test]
    fn paper_dimensions_give_128_wide_heads() {
        let cfg = ModelConfig::with_dims(100, 10, 512);
        assert_eq!(cfg.head_dim(), 128);
        assert_eq!(cfg.d_inner, 1024);
    }

    #[test]
    fn xavier_bounds_hold() {
        let p = ModelParams::<f64>::init(small(), 9).unwrap();
        let id = p.layout.decoder[0].ffn.w1;
        let [r, c] = [8.0, 16.0];
        let a = (6.0f64 / (r + c)).sqrt();
        assert!(p.get(id).data().iter().all(|v| v.abs() <= a));
        let gain = p.layout.encoder[0].norm1.as_ref().unwrap().gain;
        assert!(p.get(gain).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn from_named_checks_layout() {
        let p = ModelParams::<f32>::init(small(), 1).unwrap();
        let named: Vec<_> = p.names().iter().cloned().zip(p.tensors().iter().cloned()).collect();
        assert_eq!(ModelParams::from_named(small(), named.clone()).unwrap(), p);
        let mut bad = named.clone();
        bad[0].1 = Tensor::zeros([1, 1]);
        assert!(ModelParams::from_named(small(), bad).is_err());
        let mut renamed = named;
        renamed[1].0 = "nope".into();
        assert!(ModelParams::from_named(small(), renamed).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small();
        cfg.n_heads = 3;
        assert!(ModelParams::<f32>::init(cfg, 0).is_err());
        let mut cfg = small();
        cfg.n_dec_layers = 3;
        assert!(cfg.validate().is_err());
    }
}
