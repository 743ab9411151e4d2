//! Training losses: mean binary cross-entropy, the relational cosine loss on
//! label embeddings, and their weighted sum.

use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::relgraph::{RelationGraph, RelationKind};
use crate::tape::{Tape, Var};
use crate::{Scalar, Tensor};

/// Clamp applied to probabilities before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// `(1/L) Σ −[y log ŷ + (1−y) log(1−ŷ)]` with ŷ clamped to `[ε, 1−ε]`.
pub fn bce_loss(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(shape_err!("bce_loss", "{} targets vs {} predictions", y.len(), y_hat.len()));
    }
    let total: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(&t, &p)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * libm::log(p) + (1.0 - t) * libm::log(1.0 - p))
        })
        .sum();
    Ok(total / y.len() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}

/// Per label: minus the mean cosine similarity to its pulling neighbors plus
/// the mean similarity to its pushing neighbors (self excluded), averaged
/// over labels that have at least one neighbor. Zero when no label does.
/// A zero-norm embedding contributes cosine 0.
pub fn relational_loss<S: Scalar>(embeddings: &Tensor<S>, graph: &RelationGraph) -> Result<f64> {
    let (l, _) = embeddings.dims2("relational_loss")?;
    if l != graph.num_labels() {
        return Err(Error::LabelCountMismatch { expected: graph.num_labels(), found: l });
    }
    let rows: Vec<Vec<f64>> = (0..l).map(|i| embeddings.row(i).iter().map(|v| v.as_f64()).collect()).collect();
    let mut degenerate = false;
    let mut total = 0.0;
    let mut active = 0usize;
    for i in 0..l {
        let mut term = 0.0;
        let mut has = false;
        for (kind, sign) in [(RelationKind::Pulling, -1.0), (RelationKind::Pushing, 1.0)] {
            let nb = graph.neighbors(kind, i);
            if nb.is_empty() {
                continue;
            }
            has = true;
            let sum: f64 = nb
                .iter()
                .map(|&j| {
                    cosine(&rows[i], &rows[j]).unwrap_or_else(|| {
                        degenerate = true;
                        0.0
                    })
                })
                .sum();
            term += sign * sum / nb.len() as f64;
        }
        if has {
            total += term;
            active += 1;
        }
    }
    if degenerate {
        log::warn!("relational loss: zero-norm label embedding, cosine taken as 0");
    }
    Ok(if active == 0 { 0.0 } else { total / active as f64 })
}

/// The relational loss as a fixed linear functional of the cosine matrix:
/// `Σ_ij C_ij cos(v_i, v_j)`, precomputed from the graph.
#[derive(Clone, Debug)]
pub struct RelationalLoss<S> {
    coefficients: Tensor<S>,
    active_labels: usize,
}

impl<S: Scalar> RelationalLoss<S> {
    pub fn new(graph: &RelationGraph) -> Self {
        let l = graph.num_labels();
        let mut c = alloc::vec![0.0f64; l * l];
        let mut active = 0usize;
        for i in 0..l {
            let mut has = false;
            for (kind, sign) in [(RelationKind::Pulling, -1.0), (RelationKind::Pushing, 1.0)] {
                let nb = graph.neighbors(kind, i);
                if nb.is_empty() {
                    continue;
                }
                has = true;
                for &j in nb {
                    c[i * l + j] += sign / nb.len() as f64;
                }
            }
            active += has as usize;
        }
        if active > 0 {
            for v in &mut c {
                *v /= active as f64;
            }
        }
        let coefficients = Tensor::new([l, l], c.into_iter().map(S::of).collect()).expect("L×L coefficients");
        Self { coefficients, active_labels: active }
    }

    pub fn active_labels(&self) -> usize {
        self.active_labels
    }

    pub fn is_trivial(&self) -> bool {
        self.active_labels == 0
    }

    /// Records the loss of `embeddings` (L×d) on `tape`.
    pub fn on_tape(&self, tape: &mut Tape<'_, S>, embeddings: Var) -> Result<Var> {
        let n = tape.normalize_rows(embeddings)?;
        let gram = tape.matmul_bt(n, n)?;
        let c = tape.constant(self.coefficients.clone());
        let weighted = tape.mul(gram, c)?;
        tape.sum(weighted)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_bce: f64,
    pub l_rel: f64,
    pub lambda_rel: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(l_bce: f64, l_rel: f64, lambda_rel: f64) -> Self {
        Self { l_bce, l_rel, lambda_rel, total: l_bce + lambda_rel * l_rel }
    }
}

pub fn total_loss<S: Scalar>(
    y: &[f64],
    y_hat: &[f64],
    embeddings: &Tensor<S>,
    graph: &RelationGraph,
    lambda_rel: f64,
) -> Result<LossReport> {
    if !(lambda_rel >= 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("lambda_rel {lambda_rel} must be non-negative")));
    }
    let l_bce = bce_loss(y, y_hat)?;
    let l_rel = relational_loss(embeddings, graph)?;
    Ok(LossReport::new(l_bce, l_rel, lambda_rel))
}
