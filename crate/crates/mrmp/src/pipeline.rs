//! Command implementations shared by the binary and the integration tests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use mrmp_core::data::{dataset_stats, Dataset, InputType};
use mrmp_core::metrics::{auc_per_label, tune_threshold, Metric, MetricsReport};
use mrmp_core::model::{
    decode_features, encode, relation_forward, vote_logits, Forward, ModelConfig, ModelParams, RelationGraphTensors,
};
use mrmp_core::relgraph::{build_relation_graphs, node_degree_groups, GraphOptions, RelationGraph, RelationKind};
use mrmp_core::tape::Tape;
use mrmp_core::trainer::{GraphContext, Trainer};

use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats::graph::{degree_histogram, write_graph};
use crate::formats::sequence::{read_sequence, SequenceOptions};
use crate::formats::sparse::read_sparse;

pub const CONFIG_ECHO: &str = "config.txt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Writes `contents`, creating parent directories.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Writes the effective configuration into `out`.
pub fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_file(&out.join(CONFIG_ECHO), &cfg.to_text())
}

/// Reads a split in the configured input format and applies `max_seq_len`.
pub fn load_dataset(cfg: &RunConfig, path: &Path) -> Result<Dataset> {
    let mut ds = match cfg.input_type {
        InputType::BinaryVector => read_sparse(path)?,
        InputType::Sequential => {
            let vocab = cfg.require(&cfg.vocab, "vocab")?;
            let opts = SequenceOptions { num_labels: cfg.num_labels, max_seq_len: cfg.max_seq_len };
            read_sequence(path, vocab, &opts)?
        }
    };
    let long = ds.instances.iter().filter(|i| i.tokens.len() > cfg.max_seq_len).count();
    if long > 0 {
        log::info!("{}: {long} instances capped at {} tokens", path.display(), cfg.max_seq_len);
        ds.truncate(cfg.max_seq_len);
    }
    Ok(ds)
}

pub fn check_compatible(reference: &Dataset, other: &Dataset, what: &str) -> Result<()> {
    if reference.num_labels != other.num_labels {
        return Err(CliError::LabelMismatch(format!(
            "{what} has {} labels, expected {}",
            other.num_labels, reference.num_labels
        )));
    }
    if reference.num_features != other.num_features || reference.input_type != other.input_type {
        return Err(CliError::Config(format!(
            "{what} has {} {} features, expected {} {}",
            other.num_features,
            other.input_type.name(),
            reference.num_features,
            reference.input_type.name()
        )));
    }
    Ok(())
}

/// Pulling/pushing graphs of a training split. Fails when every label is
/// constant, or with fewer than two labels.
pub fn build_graph(ds: &Dataset, options: &GraphOptions) -> Result<RelationGraph> {
    if ds.is_empty() {
        return Err(CliError::Degenerate("no instances".into()));
    }
    if ds.num_labels < 2 {
        return Err(CliError::Degenerate(format!("{} labels; relations need at least two", ds.num_labels)));
    }
    let g = build_relation_graphs(&ds.label_matrix(), options)?;
    if g.stats.degenerate {
        return Err(CliError::Degenerate(format!("every label is constant over {} instances", ds.len())));
    }
    Ok(g)
}

pub fn graph_summary(g: &RelationGraph) -> String {
    let mut s = String::from("relation,edges\n");
    for k in RelationKind::ALL {
        let _ = writeln!(s, "{},{}", k.name(), g.edge_count(k));
    }
    s.push('\n');
    s.push_str(&degree_histogram(g));
    s
}

/// Thresholds tuned per metric on `(y, scores)`.
pub fn tune_all(y: &[Vec<bool>], scores: &[Vec<f64>], grid: &[f64]) -> Result<Vec<(Metric, f64)>> {
    Metric::ALL.iter().map(|&m| Ok((m, tune_threshold(y, scores, m, grid)?.0))).collect()
}

/// Metrics on `(y, scores)` at thresholds tuned on the same split.
pub fn self_tuned_report(y: &[Vec<bool>], scores: &[Vec<f64>], grid: &[f64]) -> Result<MetricsReport> {
    Ok(MetricsReport::compute(y, scores, &tune_all(y, scores, grid)?)?)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| format!("{x}"))
}

/// `metric,value,threshold`: the four set metrics, then one `auc_<j>` row
/// per label (threshold empty, undefined AUC as `nan`).
pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut s = String::from("metric,value,threshold\n");
    for &(m, v, t) in &report.values {
        let _ = writeln!(s, "{},{v},{t}", m.name());
    }
    for (j, a) in report.auc.iter().enumerate() {
        let _ = writeln!(s, "auc_{j},{},", fmt_opt(*a));
    }
    s
}

pub fn stats_csv(ds: &Dataset) -> String {
    let s = dataset_stats(ds);
    format!(
        "instances,labels,features,cardinality,mean_length\n{},{},{},{},{}\n",
        s.instances, s.labels, s.features, s.cardinality, s.mean_length
    )
}

pub fn predictions_csv(scores: &[Vec<f64>]) -> String {
    let l = scores.first().map_or(0, Vec::len);
    let mut s = String::from("instance");
    for j in 0..l {
        let _ = write!(s, ",p_{j}");
    }
    s.push('\n');
    for (i, row) in scores.iter().enumerate() {
        let _ = write!(s, "{i}");
        for p in row {
            let _ = write!(s, ",{p}");
        }
        s.push('\n');
    }
    s
}

pub struct TrainOutcome {
    /// Parameters of the selected epoch.
    pub params: ModelParams<f32>,
    pub graph: RelationGraph,
    pub log: String,
    /// 1-based epoch of the selected parameters.
    pub best_epoch: usize,
    pub best_value: f64,
    pub epochs_run: usize,
    /// Validation report of the selected epoch.
    pub best_report: MetricsReport,
}

pub const LOG_HEADER: &str = "epoch,l_bce,l_rel,total,lr,val_acc,val_ebf1,val_mif1,val_maf1,val_auc";

fn report_meta(report: &MetricsReport) -> BTreeMap<String, Option<f64>> {
    let mut m: BTreeMap<String, Option<f64>> =
        report.values.iter().map(|&(metric, v, _)| (metric.name().to_string(), Some(v))).collect();
    m.insert("auc".into(), report.mean_auc());
    m
}

/// Trains for up to `cfg.epochs` epochs, selecting on validation
/// `cfg.selection_metric` (metrics tuned per epoch on the validation split;
/// the training split stands in when none is given). Stops after
/// `cfg.patience` epochs without improvement (0 disables early stopping).
/// With `out`, writes the config echo, graph, log and best checkpoint.
pub fn train(
    cfg: &RunConfig,
    train: &Dataset,
    valid: Option<&Dataset>,
    graph: Option<RelationGraph>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(CliError::Degenerate("training split is empty".into()));
    }
    if let Some(v) = valid {
        check_compatible(train, v, "validation split")?;
        if v.is_empty() {
            return Err(CliError::Degenerate("validation split is empty".into()));
        }
    }
    let graph = match graph {
        Some(g) if g.num_labels() != train.num_labels => {
            return Err(CliError::LabelMismatch(format!(
                "graph has {} labels, training split has {}",
                g.num_labels(),
                train.num_labels
            )))
        }
        Some(g) => g,
        None => build_graph(train, &cfg.graph_options()?)?,
    };
    let model_cfg = cfg.model_config(train.vocab_size(), train.num_labels)?;
    let train_cfg = cfg.train_config()?;
    let params = ModelParams::<f32>::init(model_cfg, cfg.seed)?;
    let selection = valid.unwrap_or_else(|| {
        log::warn!("no validation split; selecting on the training split");
        train
    });
    let y_sel = selection.dense_labels();

    if let Some(out) = out {
        echo_config(cfg, out)?;
        write_graph(&graph, &out.join("graph.txt"))?;
    }
    let mut trainer = Trainer::new(params, graph, train_cfg)?;
    let mut log_text = format!("{LOG_HEADER}\n");
    let mut best: Option<(usize, f64, ModelParams<f32>, MetricsReport)> = None;
    let mut since_best = 0usize;
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        let stats = trainer.train_epoch(train, epoch).map_err(|e| match e {
            mrmp_core::Error::NonFinite { op } => {
                CliError::NonFinite(format!("epoch {}: {op} produced a non-finite value", epoch + 1))
            }
            e => e.into(),
        })?;
        let l = &stats.loss;
        if !(l.l_bce.is_finite() && l.l_rel.is_finite() && l.total.is_finite()) {
            return Err(CliError::NonFinite(format!(
                "epoch {}: l_bce={} l_rel={} total={} max_grad_norm={}",
                epoch + 1,
                l.l_bce,
                l.l_rel,
                l.total,
                stats.max_grad_norm
            )));
        }
        let scores = trainer.predict(selection)?;
        let report = self_tuned_report(&y_sel, &scores, &cfg.threshold_grid)?;
        let get = |m| report.get(m).expect("all metrics reported");
        let _ = writeln!(
            log_text,
            "{},{},{},{},{},{},{},{},{},{}",
            epoch + 1,
            l.l_bce,
            l.l_rel,
            l.total,
            stats.lr,
            get(Metric::Acc),
            get(Metric::EbF1),
            get(Metric::MiF1),
            get(Metric::MaF1),
            fmt_opt(report.mean_auc())
        );
        log::info!("epoch {}: total {:.5} val {} {:.4}", epoch + 1, l.total, cfg.selection_metric.name(), get(cfg.selection_metric));
        epochs_run = epoch + 1;
        let value = get(cfg.selection_metric);
        if best.as_ref().is_none_or(|b| value > b.1) {
            if let Some(out) = out {
                let meta = CheckpointMeta {
                    config: cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
                    epoch: epoch + 1,
                    metrics: report_meta(&report),
                };
                save_checkpoint(&out.join(CHECKPOINT_DIR), &trainer.params, &trainer.graph.graph, train.input_type, &meta)?;
            }
            best = Some((epoch + 1, value, trainer.params.clone(), report));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if let Some(out) = out {
            write_file(&out.join(TRAIN_LOG), &log_text)?;
        }
        if cfg.patience > 0 && since_best >= cfg.patience {
            log::info!("no improvement for {} epochs; stopping", cfg.patience);
            break;
        }
    }
    let (best_epoch, best_value, params, best_report) =
        best.ok_or_else(|| CliError::Config("epochs must be positive".into()))?;
    Ok(TrainOutcome { params, graph: trainer.graph.graph, log: log_text, best_epoch, best_value, epochs_run, best_report })
}

fn check_model_data(params: &ModelParams<f32>, ds: &Dataset, what: &str) -> Result<()> {
    if ds.num_labels != params.config.num_labels {
        return Err(CliError::LabelMismatch(format!(
            "{what} has {} labels, checkpoint has {}",
            ds.num_labels, params.config.num_labels
        )));
    }
    if ds.vocab_size() > params.config.vocab_size {
        return Err(CliError::Config(format!(
            "{what} needs a vocabulary of {}, checkpoint has {}",
            ds.vocab_size(),
            params.config.vocab_size
        )));
    }
    if let Some(len) = ds.instances.iter().map(|i| i.tokens.len()).max().filter(|&n| n > params.config.max_seq_len) {
        return Err(CliError::Config(format!("{what}: sequence of {len} tokens exceeds max_seq_len {}", params.config.max_seq_len)));
    }
    Ok(())
}

/// Trained parameters with the graph they were trained on.
#[derive(Clone, Copy)]
pub struct Model<'a> {
    pub params: &'a ModelParams<f32>,
    pub graph: &'a RelationGraph,
}

impl<'a> From<&'a Checkpoint> for Model<'a> {
    fn from(c: &'a Checkpoint) -> Self {
        Model { params: &c.params, graph: &c.graph }
    }
}

impl<'a> From<&'a TrainOutcome> for Model<'a> {
    fn from(o: &'a TrainOutcome) -> Self {
        Model { params: &o.params, graph: &o.graph }
    }
}

/// Label probabilities of `ds` under stored parameters and graph.
pub fn scores(params: &ModelParams<f32>, graph: &RelationGraph, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    check_model_data(params, ds, "dataset")?;
    let ctx = GraphContext::new(graph.clone(), params.config.mean_aggregation);
    Ok(mrmp_core::trainer::predict(params, &ctx, ds)?)
}

/// Test-split metrics at thresholds tuned on `valid` (on `test` itself
/// when no validation split is given).
pub fn evaluate(model: Model<'_>, valid: Option<&Dataset>, test: &Dataset, grid: &[f64]) -> Result<MetricsReport> {
    let test_scores = scores(model.params, model.graph, test)?;
    let y_test = test.dense_labels();
    let thresholds = match valid {
        Some(v) => {
            check_compatible(test, v, "validation split")?;
            tune_all(&v.dense_labels(), &scores(model.params, model.graph, v)?, grid)?
        }
        None => {
            log::warn!("no validation split; thresholds tuned on the evaluated split");
            tune_all(&y_test, &test_scores, grid)?
        }
    };
    Ok(MetricsReport::compute(&y_test, &test_scores, &thresholds)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelDelta {
    pub label: usize,
    pub auc_with: Option<f64>,
    pub auc_without: Option<f64>,
    pub degree_plus: usize,
    pub degree_minus: usize,
}

impl LabelDelta {
    pub fn delta(&self) -> Option<f64> {
        Some(self.auc_with? - self.auc_without?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupRow {
    pub relation: RelationKind,
    pub group: usize,
    pub degree_range: Option<(usize, usize)>,
    pub labels: usize,
    pub mean_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub per_label: Vec<LabelDelta>,
    pub groups: Vec<GroupRow>,
    /// Mean ΔAUC over labels with an edge in either graph.
    pub connected: Option<f64>,
    /// Mean ΔAUC over labels without any edge.
    pub isolated: Option<f64>,
}

fn mean_delta<'a>(rows: impl Iterator<Item = &'a LabelDelta>) -> Option<f64> {
    let d: Vec<f64> = rows.filter_map(LabelDelta::delta).collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Per-label AUC of the full model minus that of the ablation, averaged
/// within degree groups of each relation graph.
pub fn ablation_report(
    with: Model<'_>,
    without: Model<'_>,
    test: &Dataset,
    graph: &RelationGraph,
    n_groups: usize,
) -> Result<AblationReport> {
    let l = with.params.config.num_labels;
    for (what, n) in [("ablation checkpoint", without.params.config.num_labels), ("graph", graph.num_labels())] {
        if n != l {
            return Err(CliError::LabelMismatch(format!("{what} has {n} labels, full model has {l}")));
        }
    }
    let y = test.dense_labels();
    let a = auc_per_label(&y, &scores(with.params, with.graph, test)?)?;
    let b = auc_per_label(&y, &scores(without.params, without.graph, test)?)?;
    let dp = graph.degrees(RelationKind::Pulling);
    let dn = graph.degrees(RelationKind::Pushing);
    let per_label: Vec<LabelDelta> = (0..l)
        .map(|j| LabelDelta { label: j, auc_with: a[j], auc_without: b[j], degree_plus: dp[j], degree_minus: dn[j] })
        .collect();
    let mut groups = Vec::new();
    for kind in RelationKind::ALL {
        for (g, grp) in node_degree_groups(graph, kind, n_groups).into_iter().enumerate() {
            groups.push(GroupRow {
                relation: kind,
                group: g,
                degree_range: grp.degree_range,
                labels: grp.labels.len(),
                mean_delta: mean_delta(grp.labels.iter().map(|&j| &per_label[j])),
            });
        }
    }
    let connected = mean_delta(per_label.iter().filter(|r| r.degree_plus + r.degree_minus > 0));
    let isolated = mean_delta(per_label.iter().filter(|r| r.degree_plus + r.degree_minus == 0));
    Ok(AblationReport { per_label, groups, connected, isolated })
}

impl AblationReport {
    /// `label,auc,degree_plus,degree_minus,auc_ablation,delta_auc`.
    pub fn labels_csv(&self) -> String {
        let mut s = String::from("label,auc,degree_plus,degree_minus,auc_ablation,delta_auc\n");
        for r in &self.per_label {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.label,
                fmt_opt(r.auc_with),
                r.degree_plus,
                r.degree_minus,
                fmt_opt(r.auc_without),
                fmt_opt(r.delta())
            );
        }
        s
    }

    /// One row per degree group and relation.
    pub fn groups_csv(&self) -> String {
        let mut s = String::from("relation,group,min_degree,max_degree,labels,mean_delta_auc\n");
        for g in &self.groups {
            let (lo, hi) = g.degree_range.map_or((String::new(), String::new()), |(a, b)| (a.to_string(), b.to_string()));
            let _ = writeln!(s, "{},{},{lo},{hi},{},{}", g.relation.name(), g.group, g.labels, fmt_opt(g.mean_delta));
        }
        let _ = writeln!(s, "any,connected,,,{},{}", self.per_label.iter().filter(|r| r.degree_plus + r.degree_minus > 0).count(), fmt_opt(self.connected));
        let _ = writeln!(s, "any,isolated,,,{},{}", self.per_label.iter().filter(|r| r.degree_plus + r.degree_minus == 0).count(), fmt_opt(self.isolated));
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub seq_len: usize,
    pub num_labels: usize,
    pub encode_ms: f64,
    pub relation_ms: f64,
    pub decode_ms: f64,
    pub total_ms: f64,
}

/// Wall-clock milliseconds of one inference forward pass per component,
/// best of `reps`, for every `(N, L)` in the grid.
pub fn bench(seq_lens: &[usize], label_counts: &[usize], d_model: usize, reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    let max_n = seq_lens.iter().copied().max().unwrap_or(1);
    for &n in seq_lens {
        for &l in label_counts {
            let cfg = ModelConfig {
                max_seq_len: max_n,
                dropout: 0.0,
                ..ModelConfig::with_dims(max_n + 2, l, d_model)
            };
            cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
            let params = ModelParams::<f32>::init(cfg, seed)?;
            let edges: Vec<_> = (0..l.saturating_sub(1))
                .map(|i| (i, i + 1, if i % 2 == 0 { RelationKind::Pulling } else { RelationKind::Pushing }))
                .collect();
            let graph = RelationGraph::from_edges(l, &edges)?;
            let gt = RelationGraphTensors::<f32>::new(&graph, false);
            let tokens: Vec<usize> = (0..n).map(|i| i + 2).collect();
            let mask = vec![true; n];
            let mut best = [f64::INFINITY; 3];
            for _ in 0..reps.max(1) {
                let mut tape = Tape::new();
                let bound = params.bind_frozen(&mut tape);
                let mut fw = Forward::inference(&bound);
                let t0 = Instant::now();
                let z = encode(&mut tape, &params, &mut fw, &tokens, &mask)?;
                let t1 = Instant::now();
                let rel = relation_forward(&mut tape, &params, &fw, &gt)?;
                let t2 = Instant::now();
                let u = decode_features(&mut tape, &params, &mut fw, rel.embeddings, &z, &mask)?;
                let _ = vote_logits(&mut tape, &u, rel.embeddings)?;
                let t3 = Instant::now();
                let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
                for (slot, v) in best.iter_mut().zip([ms(t0, t1), ms(t1, t2), ms(t2, t3)]) {
                    *slot = slot.min(v);
                }
            }
            rows.push(BenchRow {
                seq_len: n,
                num_labels: l,
                encode_ms: best[0],
                relation_ms: best[1],
                decode_ms: best[2],
                total_ms: best.iter().sum(),
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("seq_len,num_labels,encode_ms,relation_ms,decode_ms,total_ms\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.3},{:.3},{:.3},{:.3}",
            r.seq_len, r.num_labels, r.encode_ms, r.relation_ms, r.decode_ms, r.total_ms
        );
    }
    s
}
