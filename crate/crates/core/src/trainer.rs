//! Mini-batch training and batched inference.
//!
//! The label embeddings `V^T` depend only on the parameters, not on the
//! instance, so each batch runs the relation module once on its own tape.
//! Every instance then gets a small tape that takes `V^T` as a leaf; the
//! cotangents of `V^T` summed over the batch are pushed back through the
//! relation tape together with the relational loss.

use alloc::vec::Vec;

use crate::data::{batch_iter, model_tokens, Batch, Dataset};
use crate::error::{Error, Result};
use crate::kernels::sigmoid;
use crate::model::{instance_logits, mix_seed, relation_forward, Forward, ModelParams, RelationGraphTensors};
use crate::objective::{LossReport, RelationalLoss};
use crate::optim::{clip_global_norm, AdamConfig, AdamState, LrSchedule};
use crate::relgraph::RelationGraph;
use crate::tape::{Tape, Var};
use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_rel: f64,
    pub batch_size: usize,
    /// Global-norm clipping threshold; 0 disables clipping.
    pub clip_norm: f64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_rel: 1.0,
            batch_size: 32,
            clip_norm: 5.0,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            seed: 0,
            shuffle: true,
        }
    }
}

/// Graph-derived constants shared by every batch.
#[derive(Clone, Debug)]
pub struct GraphContext<S> {
    pub graph: RelationGraph,
    pub tensors: RelationGraphTensors<S>,
    pub relational: RelationalLoss<S>,
}

impl<S: Scalar> GraphContext<S> {
    pub fn new(graph: RelationGraph, mean_aggregation: bool) -> Self {
        let tensors = RelationGraphTensors::new(&graph, mean_aggregation);
        let relational = RelationalLoss::new(&graph);
        Self { graph, tensors, relational }
    }
}

/// Relational-loss weight actually applied: the loss is dropped together
/// with the relation module.
pub fn effective_lambda<S: Scalar>(params: &ModelParams<S>, lambda_rel: f64) -> f64 {
    if params.config.mrmp_enabled {
        lambda_rel
    } else {
        0.0
    }
}

/// One training example as seen by the loss: model tokens and 0/1 targets.
#[derive(Clone, Debug)]
pub struct Example<S> {
    pub tokens: Vec<usize>,
    pub targets: Vec<S>,
}

impl<S: Scalar> Example<S> {
    pub fn from_batch(batch: &Batch, ds: &Dataset) -> Vec<Self> {
        (0..batch.len())
            .map(|b| {
                let tokens = if batch.row_tokens(b).is_empty() { model_tokens(ds, batch.indices[b]) } else { batch.row_tokens(b).to_vec() };
                let targets = batch.labels[b].iter().map(|&y| if y { S::one() } else { S::zero() }).collect();
                Self { tokens, targets }
            })
            .collect()
    }
}

/// The whole batch objective on a single tape. Returns
/// `(total, l_bce, l_rel)`; `l_rel` is `None` when it does not enter the loss.
pub fn batch_loss_on_tape<S: Scalar>(
    tape: &mut Tape<'_, S>,
    params: &ModelParams<S>,
    fw: &mut Forward<'_>,
    graph: &GraphContext<S>,
    lambda_rel: f64,
    examples: &[Example<S>],
) -> Result<(Var, Var, Option<Var>)> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rel = relation_forward(tape, params, fw, &graph.tensors)?;
    let scale = S::of(1.0 / examples.len() as f64);
    let mut bce: Option<Var> = None;
    for ex in examples {
        let mask = alloc::vec![true; ex.tokens.len()];
        let logits = instance_logits(tape, params, fw, rel.embeddings, &ex.tokens, &mask)?;
        let l = tape.bce_with_logits(logits, &ex.targets)?;
        let l = tape.scale(l, scale)?;
        bce = Some(match bce {
            None => l,
            Some(b) => tape.add(b, l)?,
        });
    }
    let bce = bce.expect("examples are non-empty");
    let lambda = effective_lambda(params, lambda_rel);
    if lambda > 0.0 && !graph.relational.is_trivial() {
        let lrel = graph.relational.on_tape(tape, rel.embeddings)?;
        let weighted = tape.scale(lrel, S::of(lambda))?;
        let total = tape.add(bce, weighted)?;
        Ok((total, bce, Some(lrel)))
    } else {
        Ok((bce, bce, None))
    }
}

/// Gradients of the batch objective for every parameter (in layout order),
/// computed with one relation tape and one tape per example. `seed` drives
/// dropout; `training = false` disables it.
pub fn batch_gradients<S: Scalar>(
    params: &ModelParams<S>,
    graph: &GraphContext<S>,
    lambda_rel: f64,
    examples: &[Example<S>],
    training: bool,
    seed: u64,
) -> Result<(Vec<Tensor<S>>, LossReport)> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut grads: Vec<Tensor<S>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();

    let mut rel_tape = Tape::new();
    let rel_bound = params.bind(&mut rel_tape);
    let rel_fw = Forward::inference(&rel_bound);
    let rel = relation_forward(&mut rel_tape, params, &rel_fw, &graph.tensors)?;
    let lambda = effective_lambda(params, lambda_rel);
    let lrel = if lambda > 0.0 && !graph.relational.is_trivial() {
        Some(graph.relational.on_tape(&mut rel_tape, rel.embeddings)?)
    } else {
        None
    };
    let vt = rel_tape.value(rel.embeddings).clone();
    let mut grad_vt = Tensor::zeros(vt.shape().to_vec());

    let scale = S::of(1.0 / examples.len() as f64);
    let mut bce_total = 0.0;
    for (k, ex) in examples.iter().enumerate() {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let mut fw = if training {
            Forward::training(&bound, params.config.dropout, mix_seed(seed ^ mix_seed(k as u64)))
        } else {
            Forward::inference(&bound)
        };
        let vt_var = tape.leaf(&vt, true);
        let mask = alloc::vec![true; ex.tokens.len()];
        let logits = instance_logits(&mut tape, params, &mut fw, vt_var, &ex.tokens, &mask)?;
        let loss = tape.bce_with_logits(logits, &ex.targets)?;
        bce_total += tape.value(loss).item().as_f64();
        let loss = tape.scale(loss, scale)?;
        let mut g = tape.backward(loss)?;
        for (acc, &v) in grads.iter_mut().zip(bound.vars()) {
            if let Some(gv) = g.take(v) {
                acc.add_assign(&gv)?;
            }
        }
        if let Some(gv) = g.take(vt_var) {
            grad_vt.add_assign(&gv)?;
        }
    }

    let mut seeds = alloc::vec![(rel.embeddings, grad_vt)];
    let l_rel = match lrel {
        Some(v) => {
            let value = rel_tape.value(v).item().as_f64();
            seeds.push((v, Tensor::scalar(S::of(lambda))));
            value
        }
        None => crate::objective::relational_loss(&vt, &graph.graph)?,
    };
    let mut g = rel_tape.backward_from(seeds)?;
    for (acc, &v) in grads.iter_mut().zip(rel_bound.vars()) {
        if let Some(gv) = g.take(v) {
            acc.add_assign(&gv)?;
        }
    }
    let report = LossReport::new(bce_total / examples.len() as f64, l_rel, lambda);
    if !report.total.is_finite() {
        return Err(Error::NonFinite { op: "batch_loss" });
    }
    Ok((grads, report))
}

/// Final label embeddings `V^T` of the current parameters.
pub fn label_embeddings<S: Scalar>(params: &ModelParams<S>, graph: &GraphContext<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let fw = Forward::inference(&bound);
    let rel = relation_forward(&mut tape, params, &fw, &graph.tensors)?;
    Ok(tape.value(rel.embeddings).clone())
}

/// Label probabilities for every instance of `ds`.
pub fn predict<S: Scalar>(params: &ModelParams<S>, graph: &GraphContext<S>, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    let vt = label_embeddings(params, graph)?;
    (0..ds.len()).map(|i| predict_tokens(params, &vt, &model_tokens(ds, i))).collect()
}

/// Label probabilities for one token sequence given precomputed `V^T`.
pub fn predict_tokens<S: Scalar>(params: &ModelParams<S>, vt: &Tensor<S>, tokens: &[usize]) -> Result<Vec<f64>> {
    let mask = alloc::vec![true; tokens.len()];
    predict_masked(params, vt, tokens, &mask)
}

/// As [`predict_tokens`] for a padded row with its mask.
pub fn predict_masked<S: Scalar>(params: &ModelParams<S>, vt: &Tensor<S>, tokens: &[usize], mask: &[bool]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let mut fw = Forward::inference(&bound);
    let vt_var = tape.leaf(vt, false);
    let logits = instance_logits(&mut tape, params, &mut fw, vt_var, tokens, mask)?;
    Ok(tape.value(logits).data().iter().map(|&x| sigmoid(x).as_f64()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossReport,
    pub lr: f64,
    pub max_grad_norm: f64,
}

/// Parameters, optimizer state and graph for one training run.
pub struct Trainer<S: Scalar> {
    pub params: ModelParams<S>,
    pub graph: GraphContext<S>,
    pub config: TrainConfig,
    adam: AdamState<S>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(params: ModelParams<S>, graph: RelationGraph, config: TrainConfig) -> Result<Self> {
        config.schedule.validate()?;
        if graph.num_labels() != params.config.num_labels {
            return Err(Error::LabelCountMismatch { expected: params.config.num_labels, found: graph.num_labels() });
        }
        if !(config.lambda_rel >= 0.0) || config.batch_size == 0 {
            return Err(Error::InvalidArgument(alloc::format!("invalid training config {config:?}")));
        }
        let graph = GraphContext::new(graph, params.config.mean_aggregation);
        let adam = AdamState::new(params.tensors(), config.adam);
        Ok(Self { params, graph, config, adam })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step_count()
    }

    /// One pass over `ds`. Loss figures are instance-weighted means over
    /// the epoch.
    pub fn train_epoch(&mut self, ds: &Dataset, epoch: usize) -> Result<EpochStats> {
        if ds.num_labels != self.params.config.num_labels {
            return Err(Error::LabelCountMismatch { expected: self.params.config.num_labels, found: ds.num_labels });
        }
        let lr = self.config.schedule.lr_at_epoch(epoch);
        let batches = batch_iter(ds, self.config.batch_size, self.config.shuffle, self.config.seed, epoch)?;
        let (mut bce, mut rel, mut n) = (0.0, 0.0, 0usize);
        let mut max_norm = 0.0f64;
        let mut lambda = 0.0;
        for batch in &batches {
            let examples = Example::from_batch(batch, ds);
            let seed = mix_seed(self.config.seed ^ mix_seed(0x5EED ^ self.adam.step_count()));
            let (mut grads, report) = batch_gradients(&self.params, &self.graph, self.config.lambda_rel, &examples, true, seed)?;
            max_norm = max_norm.max(clip_global_norm(&mut grads, self.config.clip_norm));
            self.adam.step(self.params.tensors_mut(), &grads, lr)?;
            bce += report.l_bce * batch.len() as f64;
            rel += report.l_rel * batch.len() as f64;
            lambda = report.lambda_rel;
            n += batch.len();
        }
        let loss = LossReport::new(bce / n as f64, rel / n as f64, lambda);
        Ok(EpochStats { epoch, loss, lr, max_grad_norm: max_norm })
    }

    pub fn predict(&self, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
        predict(&self.params, &self.graph, ds)
    }

    pub fn label_embeddings(&self) -> Result<Tensor<S>> {
        label_embeddings(&self.params, &self.graph)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{InputType, Instance};
    use crate::gradcheck::relative_error;
    use crate::model::ModelConfig;
    use crate::relgraph::RelationKind;
    use alloc::vec;

    fn tiny() -> (ModelParams<f64>, GraphContext<f64>, Vec<Example<f64>>) {
        let cfg = ModelConfig {
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_rel_layers: 1,
            dropout: 0.0,
            ..ModelConfig::with_dims(9, 4, 8)
        };
        let params = ModelParams::init(cfg, 3).unwrap();
        let g = RelationGraph::from_edges(4, &[(0, 1, RelationKind::Pulling), (2, 3, RelationKind::Pushing)]).unwrap();
        let examples = vec![
            Example { tokens: vec![1, 4, 2, 8, 0, 3], targets: vec![1.0, 1.0, 0.0, 0.0] },
            Example { tokens: vec![5, 6], targets: vec![0.0, 0.0, 1.0, 0.0] },
        ];
        (params, GraphContext::new(g, false), examples)
    }

    #[test]
    fn two_stage_gradients_equal_single_tape_gradients() {
        let (params, graph, examples) = tiny();
        let (staged, report) = batch_gradients(&params, &graph, 0.7, &examples, false, 0).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let mut fw = Forward::inference(&bound);
        let (total, bce, lrel) = batch_loss_on_tape(&mut tape, &params, &mut fw, &graph, 0.7, &examples).unwrap();
        assert!((tape.value(bce).item() - report.l_bce).abs() < 1e-12);
        assert!((tape.value(lrel.unwrap()).item() - report.l_rel).abs() < 1e-12);
        assert!((tape.value(total).item() - report.total).abs() < 1e-12);
        let g = tape.backward(total).unwrap();
        for (k, &v) in bound.vars().iter().enumerate() {
            let single = g.wrt(v);
            for (a, b) in staged[k].data().iter().zip(single.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{}", params.names()[k]);
            }
        }
    }

    #[test]
    fn spot_check_against_finite_differences() {
        let (params, graph, examples) = tiny();
        let (grads, _) = batch_gradients(&params, &graph, 1.0, &examples, false, 0).unwrap();
        let loss_at = |p: &ModelParams<f64>| {
            let mut tape = Tape::new();
            let b = p.bind_frozen(&mut tape);
            let mut fw = Forward::inference(&b);
            let (t, _, _) = batch_loss_on_tape(&mut tape, p, &mut fw, &graph, 1.0, &examples).unwrap();
            tape.value(t).item()
        };
        let h = 1e-5;
        for name in ["relation.0.w_push", "decoder.0.ffn.w1", "token_embeddings", "relation.relation_embedding"] {
            let id = params.find(name).unwrap();
            for e in [0, 5] {
                let mut plus = params.clone();
                plus.get_mut(id).data_mut()[e] += h;
                let mut minus = params.clone();
                minus.get_mut(id).data_mut()[e] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let a = grads[id.index()].data()[e];
                assert!(relative_error(a, fd) < 1e-5 || (a - fd).abs() < 1e-10, "{name}[{e}]: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let instances: Vec<Instance> =
            (0..12).map(|i| Instance { tokens: vec![i % 5, 5 + i % 3], labels: vec![i % 5 % 3] }).collect();
        let ds = Dataset::new(InputType::BinaryVector, 3, 8, instances).unwrap();
        let cfg = ModelConfig { n_heads: 2, ..ModelConfig::with_dims(ds.vocab_size(), 3, 8) };
        let g = crate::relgraph::build_relation_graphs(&ds.label_matrix(), &Default::default()).unwrap();
        let tc = TrainConfig { batch_size: 4, schedule: LrSchedule { initial_lr: 0.01, ..Default::default() }, ..Default::default() };
        let run = || {
            let mut t = Trainer::new(ModelParams::<f32>::init(cfg.clone(), 1).unwrap(), g.clone(), tc).unwrap();
            let stats: Vec<EpochStats> = (0..6).map(|e| t.train_epoch(&ds, e).unwrap()).collect();
            (stats, t.params.tensors().to_vec())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!(a[5].loss.l_bce < a[0].loss.l_bce);
    }
}
