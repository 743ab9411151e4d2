//! Binary-relevance baseline: one independent logistic regression per label
//! over the token set of each instance.

use alloc::vec::Vec;

use crate::data::{epoch_order, Dataset};
use crate::error::{Error, Result};
use crate::kernels::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogisticConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self { epochs: 30, learning_rate: 0.1, l2: 1e-5, seed: 0 }
    }
}

/// Weights are stored feature-major: `weights[t * L + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryRelevance {
    vocab: usize,
    num_labels: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl BinaryRelevance {
    /// Per-instance stochastic gradient descent on the summed per-label
    /// logistic losses, with a `1/√(1 + epoch)` step decay. Instances are
    /// treated as binary feature sets.
    pub fn fit(ds: &Dataset, config: &LogisticConfig) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (v, l) = (ds.vocab_size(), ds.num_labels);
        let mut model = Self { vocab: v, num_labels: l, weights: alloc::vec![0.0; v * l], bias: alloc::vec![0.0; l] };
        let labels = ds.dense_labels();
        let mut grad = alloc::vec![0.0; l];
        for epoch in 0..config.epochs {
            let lr = config.learning_rate / libm::sqrt(1.0 + epoch as f64);
            for i in epoch_order(ds.len(), true, config.seed, epoch) {
                let tokens = crate::data::model_tokens(ds, i);
                let scores = model.logits(&tokens);
                for j in 0..l {
                    grad[j] = sigmoid(scores[j]) - if labels[i][j] { 1.0 } else { 0.0 };
                }
                for &t in &tokens {
                    let row = &mut model.weights[t * l..(t + 1) * l];
                    for (w, g) in row.iter_mut().zip(&grad) {
                        *w -= lr * (g + config.l2 * *w);
                    }
                }
                for (b, g) in model.bias.iter_mut().zip(&grad) {
                    *b -= lr * g;
                }
            }
        }
        Ok(model)
    }

    fn logits(&self, tokens: &[usize]) -> Vec<f64> {
        let l = self.num_labels;
        let mut out = self.bias.clone();
        for &t in tokens {
            if t < self.vocab {
                for (o, w) in out.iter_mut().zip(&self.weights[t * l..(t + 1) * l]) {
                    *o += w;
                }
            }
        }
        out
    }

    /// Probabilities, one row per instance.
    pub fn predict(&self, ds: &Dataset) -> Vec<Vec<f64>> {
        (0..ds.len())
            .map(|i| self.logits(&crate::data::model_tokens(ds, i)).into_iter().map(sigmoid).collect())
            .collect()
    }
}
