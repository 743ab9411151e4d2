//! Flat `key = value` run configuration. Later assignments override earlier
//! ones, so command-line overrides are applied after the file.

use std::path::{Path, PathBuf};

use mrmp_core::data::InputType;
use mrmp_core::metrics::{default_threshold_grid, Metric};
use mrmp_core::model::{DecoderAttention, ModelConfig, RelationActivation};
use mrmp_core::optim::{AdamConfig, LrSchedule};
use mrmp_core::relgraph::GraphOptions;
use mrmp_core::trainer::TrainConfig;

use crate::error::{CliError, Result};
use crate::formats::read_to_string;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub input_type: InputType,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    /// Sequence data only; inferred from the training split when absent.
    pub num_labels: Option<usize>,

    pub d_model: usize,
    /// `None` means `2 · d_model`.
    pub d_inner: Option<usize>,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_rel_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    /// `None` means on exactly for sequential input.
    pub positional_encoding: Option<bool>,
    pub mrmp: bool,
    pub layer_norm: bool,
    pub relation_activation: RelationActivation,
    pub mean_aggregation: bool,
    pub decoder_attention: DecoderAttention,

    pub alpha: f64,
    pub yates: bool,
    pub lambda_rel: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_step_epochs: usize,
    pub lr_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub selection_metric: Metric,
    pub threshold_grid: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let s = LrSchedule::default();
        let t = TrainConfig::default();
        Self {
            input_type: InputType::BinaryVector,
            train: None,
            valid: None,
            test: None,
            vocab: None,
            graph: None,
            num_labels: None,
            d_model: m.d_model,
            d_inner: None,
            n_enc_layers: m.n_enc_layers,
            n_dec_layers: m.n_dec_layers,
            n_rel_layers: m.n_rel_layers,
            n_heads: m.n_heads,
            dropout: m.dropout,
            max_seq_len: m.max_seq_len,
            positional_encoding: None,
            mrmp: true,
            layer_norm: m.layer_norm,
            relation_activation: m.relation_activation,
            mean_aggregation: m.mean_aggregation,
            decoder_attention: m.decoder_attention,
            alpha: GraphOptions::default().alpha,
            yates: false,
            lambda_rel: t.lambda_rel,
            epochs: 50,
            patience: 10,
            batch_size: t.batch_size,
            learning_rate: s.initial_lr,
            lr_step_epochs: s.step_size_epochs,
            lr_decay: s.decay_factor,
            clip_norm: t.clip_norm,
            seed: 0,
            selection_metric: Metric::EbF1,
            threshold_grid: default_threshold_grid(),
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// Comma-separated thresholds, each in (0, 1).
pub fn parse_threshold_grid(v: &str) -> Result<Vec<f64>> {
    if v == "default" {
        return Ok(default_threshold_grid());
    }
    let grid: Vec<f64> = v
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Config(format!("bad threshold grid {v:?}")))?;
    if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(CliError::Config(format!("threshold grid {v:?} must hold values in (0, 1)")));
    }
    Ok(grid)
}

fn fmt_grid(grid: &[f64]) -> String {
    grid.iter().map(|t| format!("{t}")).collect::<Vec<_>>().join(",")
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(&read_to_string(path)?, path)?;
        Ok(c)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| CliError::parse(origin, k + 1, format!("expected key = value, got {raw:?}")))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| CliError::parse(origin, k + 1, e.to_string()))?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv.split_once('=').ok_or_else(|| CliError::Config(format!("override {kv:?} is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let bad = || CliError::Config(format!("invalid value {v:?} for {key}"));
        let usize_ = || v.parse::<usize>().map_err(|_| bad());
        let f64_ = || v.parse::<f64>().map_err(|_| bad());
        let bool_ = || parse_bool(v).ok_or_else(bad);
        match key {
            "input_type" => {
                self.input_type = match v {
                    "binary" => InputType::BinaryVector,
                    "sequential" => InputType::Sequential,
                    _ => return Err(bad()),
                }
            }
            "train" => self.train = opt_path(v),
            "valid" => self.valid = opt_path(v),
            "test" => self.test = opt_path(v),
            "vocab" => self.vocab = opt_path(v),
            "graph" => self.graph = opt_path(v),
            "num_labels" => self.num_labels = if v == "auto" { None } else { Some(usize_()?) },
            "d_model" => self.d_model = usize_()?,
            "d_inner" => self.d_inner = if v == "auto" { None } else { Some(usize_()?) },
            "n_enc_layers" => self.n_enc_layers = usize_()?,
            "n_dec_layers" => self.n_dec_layers = usize_()?,
            "n_rel_layers" => self.n_rel_layers = usize_()?,
            "n_heads" => self.n_heads = usize_()?,
            "dropout" => self.dropout = f64_()?,
            "max_seq_len" => self.max_seq_len = usize_()?,
            "positional_encoding" => self.positional_encoding = if v == "auto" { None } else { Some(bool_()?) },
            "mrmp" => self.mrmp = bool_()?,
            "layer_norm" => self.layer_norm = bool_()?,
            "relation_activation" => {
                self.relation_activation = match v {
                    "relu" => RelationActivation::Relu,
                    "identity" => RelationActivation::Identity,
                    _ => return Err(bad()),
                }
            }
            "mean_aggregation" => self.mean_aggregation = bool_()?,
            "decoder_attention" => {
                self.decoder_attention = match v {
                    "aligned" => DecoderAttention::Aligned,
                    "final" => DecoderAttention::Final,
                    _ => return Err(bad()),
                }
            }
            "alpha" => self.alpha = f64_()?,
            "yates" => self.yates = bool_()?,
            "lambda_rel" => self.lambda_rel = f64_()?,
            "epochs" => self.epochs = usize_()?,
            "patience" => self.patience = usize_()?,
            "batch_size" => self.batch_size = usize_()?,
            "learning_rate" => self.learning_rate = f64_()?,
            "lr_step_epochs" => self.lr_step_epochs = usize_()?,
            "lr_decay" => self.lr_decay = f64_()?,
            "clip_norm" => self.clip_norm = f64_()?,
            "seed" => self.seed = v.parse().map_err(|_| bad())?,
            "selection_metric" => self.selection_metric = Metric::parse(v).ok_or_else(bad)?,
            "threshold_grid" => self.threshold_grid = parse_threshold_grid(v)?,
            _ => return Err(CliError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let opt = |o: Option<String>| o.unwrap_or_else(|| "auto".into());
        vec![
            ("input_type", self.input_type.name().into()),
            ("train", path_str(&self.train)),
            ("valid", path_str(&self.valid)),
            ("test", path_str(&self.test)),
            ("vocab", path_str(&self.vocab)),
            ("graph", path_str(&self.graph)),
            ("num_labels", opt(self.num_labels.map(|v| v.to_string()))),
            ("d_model", self.d_model.to_string()),
            ("d_inner", opt(self.d_inner.map(|v| v.to_string()))),
            ("n_enc_layers", self.n_enc_layers.to_string()),
            ("n_dec_layers", self.n_dec_layers.to_string()),
            ("n_rel_layers", self.n_rel_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("dropout", format!("{}", self.dropout)),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("positional_encoding", opt(self.positional_encoding.map(|v| v.to_string()))),
            ("mrmp", self.mrmp.to_string()),
            ("layer_norm", self.layer_norm.to_string()),
            (
                "relation_activation",
                match self.relation_activation {
                    RelationActivation::Relu => "relu",
                    RelationActivation::Identity => "identity",
                }
                .into(),
            ),
            ("mean_aggregation", self.mean_aggregation.to_string()),
            (
                "decoder_attention",
                match self.decoder_attention {
                    DecoderAttention::Aligned => "aligned",
                    DecoderAttention::Final => "final",
                }
                .into(),
            ),
            ("alpha", format!("{}", self.alpha)),
            ("yates", self.yates.to_string()),
            ("lambda_rel", format!("{}", self.lambda_rel)),
            ("epochs", self.epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", format!("{}", self.learning_rate)),
            ("lr_step_epochs", self.lr_step_epochs.to_string()),
            ("lr_decay", format!("{}", self.lr_decay)),
            ("clip_norm", format!("{}", self.clip_norm)),
            ("seed", self.seed.to_string()),
            ("selection_metric", self.selection_metric.name().into()),
            ("threshold_grid", fmt_grid(&self.threshold_grid)),
        ]
    }

    /// The effective configuration as a config file.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model_config(&self, vocab_size: usize, num_labels: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            d_model: self.d_model,
            d_inner: self.d_inner.unwrap_or(2 * self.d_model),
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            n_rel_layers: self.n_rel_layers,
            n_heads: self.n_heads,
            dropout: self.dropout,
            max_seq_len: self.max_seq_len,
            vocab_size,
            num_labels,
            positional_encoding: self.positional_encoding.unwrap_or(self.input_type == InputType::Sequential),
            mrmp_enabled: self.mrmp,
            layer_norm: self.layer_norm,
            relation_activation: self.relation_activation,
            mean_aggregation: self.mean_aggregation,
            decoder_attention: self.decoder_attention,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let schedule =
            LrSchedule { initial_lr: self.learning_rate, step_size_epochs: self.lr_step_epochs, decay_factor: self.lr_decay };
        schedule.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.lambda_rel >= 0.0) || self.batch_size == 0 || !(self.clip_norm >= 0.0) {
            return Err(CliError::Config("lambda_rel, batch_size and clip_norm must be non-negative (batch_size positive)".into()));
        }
        Ok(TrainConfig {
            lambda_rel: self.lambda_rel,
            batch_size: self.batch_size,
            clip_norm: self.clip_norm,
            schedule,
            adam: AdamConfig::default(),
            seed: self.seed,
            shuffle: true,
        })
    }

    pub fn graph_options(&self) -> Result<GraphOptions> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CliError::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        Ok(GraphOptions { alpha: self.alpha, yates: self.yates })
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        path.as_deref().ok_or_else(|| CliError::Config(format!("missing `{key}` path")))
    }
}
