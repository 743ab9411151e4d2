//! Checkpoint directories: `manifest.json`, `tensors.bin` (little-endian
//! f32 arrays in manifest order) and `graph.txt` (edge list).

use std::collections::BTreeMap;
use std::path::Path;

use mrmp_core::data::InputType;
use mrmp_core::model::{DecoderAttention, ModelConfig, ModelParams, RelationActivation};
use mrmp_core::relgraph::RelationGraph;
use mrmp_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::formats::graph::{read_graph, write_graph};

pub const FORMAT: &str = "mrmp-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "tensors.bin";
pub const GRAPH: &str = "graph.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
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
    pub relation_activation: String,
    pub mean_aggregation: bool,
    pub decoder_attention: String,
}

impl From<&ModelConfig> for ModelSpec {
    fn from(c: &ModelConfig) -> Self {
        Self {
            d_model: c.d_model,
            d_inner: c.d_inner,
            n_enc_layers: c.n_enc_layers,
            n_dec_layers: c.n_dec_layers,
            n_rel_layers: c.n_rel_layers,
            n_heads: c.n_heads,
            dropout: c.dropout,
            max_seq_len: c.max_seq_len,
            vocab_size: c.vocab_size,
            num_labels: c.num_labels,
            positional_encoding: c.positional_encoding,
            mrmp_enabled: c.mrmp_enabled,
            layer_norm: c.layer_norm,
            relation_activation: match c.relation_activation {
                RelationActivation::Relu => "relu",
                RelationActivation::Identity => "identity",
            }
            .into(),
            mean_aggregation: c.mean_aggregation,
            decoder_attention: match c.decoder_attention {
                DecoderAttention::Aligned => "aligned",
                DecoderAttention::Final => "final",
            }
            .into(),
        }
    }
}

impl ModelSpec {
    pub fn to_config(&self) -> Result<ModelConfig> {
        let bad = |what: &str, v: &str| CliError::Format(format!("manifest: unknown {what} {v:?}"));
        let cfg = ModelConfig {
            d_model: self.d_model,
            d_inner: self.d_inner,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            n_rel_layers: self.n_rel_layers,
            n_heads: self.n_heads,
            dropout: self.dropout,
            max_seq_len: self.max_seq_len,
            vocab_size: self.vocab_size,
            num_labels: self.num_labels,
            positional_encoding: self.positional_encoding,
            mrmp_enabled: self.mrmp_enabled,
            layer_norm: self.layer_norm,
            relation_activation: match self.relation_activation.as_str() {
                "relu" => RelationActivation::Relu,
                "identity" => RelationActivation::Identity,
                v => return Err(bad("relation_activation", v)),
            },
            mean_aggregation: self.mean_aggregation,
            decoder_attention: match self.decoder_attention.as_str() {
                "aligned" => DecoderAttention::Aligned,
                "final" => DecoderAttention::Final,
                v => return Err(bad("decoder_attention", v)),
            },
        };
        cfg.validate().map_err(|e| CliError::Format(format!("manifest: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub input_type: String,
    pub model: ModelSpec,
    /// Effective run configuration, as written to `config.txt`.
    pub config: BTreeMap<String, String>,
    pub epoch: usize,
    pub metrics: BTreeMap<String, Option<f64>>,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: u64,
    pub blob_sha256: String,
}

/// Everything stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub config: BTreeMap<String, String>,
    pub epoch: usize,
    pub metrics: BTreeMap<String, Option<f64>>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub input_type: InputType,
    pub params: ModelParams<f32>,
    pub graph: RelationGraph,
}

fn hex_sha256(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams<f32>,
    graph: &RelationGraph,
    input_type: InputType,
    meta: &CheckpointMeta,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset, bytes: blob.len() as u64 - offset });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        input_type: input_type.name().into(),
        model: ModelSpec::from(&params.config),
        config: meta.config.clone(),
        epoch: meta.epoch,
        metrics: meta.metrics.iter().map(|(k, v)| (k.clone(), v.filter(|x| x.is_finite()))).collect(),
        tensors,
        blob_bytes: blob.len() as u64,
        blob_sha256: hex_sha256(&blob),
    };
    let blob_path = dir.join(BLOB);
    std::fs::write(&blob_path, &blob).map_err(io(&blob_path))?;
    let graph_path = dir.join(GRAPH);
    write_graph(graph, &graph_path)?;
    let manifest_path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Format(e.to_string()))?;
    std::fs::write(&manifest_path, text + "\n").map_err(io(&manifest_path))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(io(&path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT {
        return Err(CliError::Format(format!("{}: not a checkpoint manifest", path.display())));
    }
    if manifest.version != VERSION {
        return Err(CliError::Format(format!("checkpoint version {} is not supported (expected {VERSION})", manifest.version)));
    }
    Ok(manifest)
}

/// Validates the manifest against the blob (layout, byte count, checksum)
/// and the model configuration before decoding any tensor.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let config = manifest.model.to_config()?;
    let input_type = match manifest.input_type.as_str() {
        "binary" => InputType::BinaryVector,
        "sequential" => InputType::Sequential,
        v => return Err(CliError::Format(format!("manifest: unknown input_type {v:?}"))),
    };
    let mut expected = 0u64;
    for e in &manifest.tensors {
        let want = 4 * e.shape.iter().product::<usize>() as u64;
        if e.offset != expected || e.bytes != want {
            return Err(CliError::Format(format!(
                "manifest: tensor {} (shape {:?}) declares offset {} and {} bytes, expected offset {expected} and {want} bytes",
                e.name, e.shape, e.offset, e.bytes
            )));
        }
        expected += want;
    }
    if expected != manifest.blob_bytes {
        return Err(CliError::Format(format!(
            "manifest: tensors account for {expected} bytes but blob_bytes is {}",
            manifest.blob_bytes
        )));
    }
    let blob_path = dir.join(BLOB);
    let blob = std::fs::read(&blob_path).map_err(io(&blob_path))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(CliError::Format(format!(
            "{}: byte count {} does not match manifest ({} bytes)",
            blob_path.display(),
            blob.len(),
            manifest.blob_bytes
        )));
    }
    if hex_sha256(&blob) != manifest.blob_sha256 {
        return Err(CliError::Format(format!("{}: checksum mismatch, blob is corrupted", blob_path.display())));
    }
    let named = manifest
        .tensors
        .iter()
        .map(|e| {
            let bytes = &blob[e.offset as usize..(e.offset + e.bytes) as usize];
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            Tensor::new(e.shape.clone(), data).map(|t| (e.name.clone(), t))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let params = ModelParams::from_named(config, named).map_err(|e| CliError::Format(format!("manifest: {e}")))?;
    let graph = read_graph(&dir.join(GRAPH))?;
    if graph.num_labels() != params.config.num_labels {
        return Err(CliError::LabelMismatch(format!(
            "checkpoint graph has {} labels, model has {}",
            graph.num_labels(),
            params.config.num_labels
        )));
    }
    Ok(Checkpoint { manifest, input_type, params, graph })
}
