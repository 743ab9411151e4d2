//! Multi-relation label-embedding module.
//!
//! In matrix form (rows are labels), one layer computes
//! `H = (A⁺V + d⁺z₊)W₊ + (A⁻V + d⁻z₋)W₋` with `z₋ = −z₊`, where both
//! adjacencies carry self loops, `d` are the neighborhood sizes and `z` is a
//! 1×d row.
//! The composition of a neighbor state with the relation embedding is their
//! sum, so aggregating it over a neighborhood splits into the two terms.

use alloc::vec::Vec;

use super::{Forward, ModelConfig, ModelParams, RelationActivation};
use crate::error::{Error, Result};
use crate::relgraph::{RelationGraph, RelationKind};
use crate::tape::{Tape, Var};
use crate::{Scalar, Tensor};

/// Dense aggregation operators derived from a [`RelationGraph`].
#[derive(Clone, Debug)]
pub struct RelationGraphTensors<S> {
    num_labels: usize,
    edgeless: bool,
    a_plus: Tensor<S>,
    deg_plus: Tensor<S>,
    a_minus: Tensor<S>,
    deg_minus: Tensor<S>,
}

impl<S: Scalar> RelationGraphTensors<S> {
    pub fn new(graph: &RelationGraph, mean_aggregation: bool) -> Self {
        let l = graph.num_labels();
        let mut a_plus = graph.adjacency::<S>(RelationKind::Pulling, true);
        let mut a_minus = graph.adjacency::<S>(RelationKind::Pushing, true);
        let deg = |a: &mut Tensor<S>| -> Tensor<S> {
            let mut d = Vec::with_capacity(l);
            for i in 0..l {
                let n: S = a.row(i).iter().copied().sum();
                if mean_aggregation && n > S::zero() {
                    for v in &mut a.data_mut()[i * l..(i + 1) * l] {
                        *v /= n;
                    }
                    d.push(S::one());
                } else {
                    d.push(n);
                }
            }
            Tensor::new([l, 1], d).expect("one degree per label")
        };
        let deg_plus = deg(&mut a_plus);
        let deg_minus = deg(&mut a_minus);
        Self { num_labels: l, edgeless: graph.is_edgeless(), a_plus, deg_plus, a_minus, deg_minus }
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }
}

pub struct RelationOutput {
    /// Final label embeddings V^T, L×d.
    pub embeddings: Var,
    /// Pulling relation embedding used at each layer (1×d).
    pub z_plus: Vec<Var>,
    /// Pushing relation embedding used at each layer, `−z_plus`.
    pub z_minus: Vec<Var>,
    /// False when the module was bypassed.
    pub applied: bool,
}

/// Runs the relation layers from the initial label embeddings. With the
/// module disabled, or a graph without edges, returns `ReLU(V⁰)`.
pub fn relation_forward<S: Scalar>(
    tape: &mut Tape<'_, S>,
    params: &ModelParams<S>,
    fw: &Forward<'_>,
    graph: &RelationGraphTensors<S>,
) -> Result<RelationOutput> {
    let cfg: &ModelConfig = &params.config;
    if graph.num_labels != cfg.num_labels {
        return Err(Error::LabelCountMismatch { expected: cfg.num_labels, found: graph.num_labels });
    }
    let rel = &params.layout.relation;
    let mut v = fw.var(rel.label_embeddings);
    if !cfg.mrmp_enabled || graph.edgeless {
        let embeddings = tape.relu(v)?;
        return Ok(RelationOutput { embeddings, z_plus: Vec::new(), z_minus: Vec::new(), applied: false });
    }
    let a_plus = tape.constant(graph.a_plus.clone());
    let a_minus = tape.constant(graph.a_minus.clone());
    let deg_plus = tape.constant(graph.deg_plus.clone());
    let deg_minus = tape.constant(graph.deg_minus.clone());
    let mut z = fw.var(rel.relation_embedding);
    let mut z_plus = Vec::with_capacity(cfg.n_rel_layers);
    let mut z_minus = Vec::with_capacity(cfg.n_rel_layers);
    for (layer, (&wp, &wn)) in rel.w_pull.iter().zip(&rel.w_push).enumerate() {
        let zn = tape.neg(z)?;
        z_plus.push(z);
        z_minus.push(zn);
        let pull_states = tape.matmul(a_plus, v)?;
        let pull_rel = tape.matmul(deg_plus, z)?;
        let pull = tape.add(pull_states, pull_rel)?;
        let push_states = tape.matmul(a_minus, v)?;
        let push_rel = tape.matmul(deg_minus, zn)?;
        let push = tape.add(push_states, push_rel)?;
        let hp = tape.matmul(pull, fw.var(wp))?;
        let hn = tape.matmul(push, fw.var(wn))?;
        let h = tape.add(hp, hn)?;
        let last = layer + 1 == cfg.n_rel_layers;
        v = match (last, cfg.relation_activation) {
            (false, RelationActivation::Identity) => h,
            _ => tape.relu(h)?,
        };
        z = tape.matmul(z, fw.var(rel.w_rel))?;
    }
    Ok(RelationOutput { embeddings: v, z_plus, z_minus, applied: true })
}
