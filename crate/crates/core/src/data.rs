//! In-memory datasets, deterministic batching and dataset statistics.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::mix_seed;
use crate::relgraph::LabelMatrix;

/// Padding token id in batches.
pub const PAD: usize = 0;
/// Out-of-vocabulary token id for sequential data.
pub const UNK: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputType {
    /// Unordered set of active feature ids, no positional encoding.
    BinaryVector,
    /// Ordered token ids.
    Sequential,
}

impl InputType {
    pub fn name(self) -> &'static str {
        match self {
            InputType::BinaryVector => "binary",
            InputType::Sequential => "sequential",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub tokens: Vec<usize>,
    /// Sorted positive label ids.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub input_type: InputType,
    pub num_labels: usize,
    /// Number of input features (binary data) or vocabulary entries
    /// including PAD and UNK (sequential data).
    pub num_features: usize,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(input_type: InputType, num_labels: usize, num_features: usize, mut instances: Vec<Instance>) -> Result<Self> {
        for (m, inst) in instances.iter_mut().enumerate() {
            inst.labels.sort_unstable();
            inst.labels.dedup();
            if input_type == InputType::BinaryVector {
                inst.tokens.sort_unstable();
                inst.tokens.dedup();
            }
            if let Some(&l) = inst.labels.last().filter(|&&l| l >= num_labels) {
                return Err(Error::InvalidArgument(format!("instance {m}: label {l} >= {num_labels}")));
            }
            if let Some(&t) = inst.tokens.iter().find(|&&t| t >= num_features) {
                return Err(Error::InvalidArgument(format!("instance {m}: token {t} >= {num_features}")));
            }
        }
        Ok(Self { input_type, num_labels, num_features, instances })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Model vocabulary: binary data gets one extra id standing in for an
    /// instance without active features.
    pub fn vocab_size(&self) -> usize {
        match self.input_type {
            InputType::BinaryVector => self.num_features + 1,
            InputType::Sequential => self.num_features,
        }
    }

    /// Token fed to the model for an instance with no tokens.
    pub fn empty_token(&self) -> usize {
        match self.input_type {
            InputType::BinaryVector => self.num_features,
            InputType::Sequential => UNK,
        }
    }

    /// Caps every sequence at `max_len` tokens, keeping the prefix (the
    /// lowest feature ids for binary data).
    pub fn truncate(&mut self, max_len: usize) {
        for inst in &mut self.instances {
            inst.tokens.truncate(max_len);
        }
    }

    pub fn label_matrix(&self) -> LabelMatrix {
        LabelMatrix::new(self.num_labels, self.instances.iter().map(|i| i.labels.clone()).collect())
            .expect("labels validated on construction")
    }

    pub fn dense_labels(&self) -> Vec<Vec<bool>> {
        self.instances
            .iter()
            .map(|inst| {
                let mut row = alloc::vec![false; self.num_labels];
                for &l in &inst.labels {
                    row[l] = true;
                }
                row
            })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
            ..self.without_instances()
        }
    }

    fn without_instances(&self) -> Dataset {
        Dataset { input_type: self.input_type, num_labels: self.num_labels, num_features: self.num_features, instances: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub instances: usize,
    pub labels: usize,
    pub features: usize,
    pub cardinality: f64,
    pub mean_length: f64,
}

pub fn dataset_stats(ds: &Dataset) -> DatasetStats {
    let m = ds.len().max(1) as f64;
    DatasetStats {
        instances: ds.len(),
        labels: ds.num_labels,
        features: ds.num_features,
        cardinality: ds.instances.iter().map(|i| i.labels.len()).sum::<usize>() as f64 / m,
        mean_length: ds.instances.iter().map(|i| i.tokens.len()).sum::<usize>() as f64 / m,
    }
}

/// Padded batch. Rows hold token ids padded with [`PAD`]; `mask` is true on
/// real tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub tokens: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub labels: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Unpadded tokens of row `b`.
    pub fn row_tokens(&self, b: usize) -> &[usize] {
        let n = self.mask[b].iter().take_while(|&&m| m).count();
        &self.tokens[b][..n]
    }

    fn build(ds: &Dataset, indices: &[usize]) -> Batch {
        let rows: Vec<Vec<usize>> = indices.iter().map(|&i| model_tokens(ds, i)).collect();
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(rows.len());
        let mut mask = Vec::with_capacity(rows.len());
        for r in rows {
            let mut m = alloc::vec![true; r.len()];
            m.resize(width, false);
            let mut t = r;
            t.resize(width, PAD);
            tokens.push(t);
            mask.push(m);
        }
        let sub = ds.subset(indices);
        Batch { indices: indices.to_vec(), tokens, mask, labels: sub.dense_labels() }
    }
}

/// Tokens of instance `i` as fed to the model (never empty).
pub fn model_tokens(ds: &Dataset, i: usize) -> Vec<usize> {
    let t = &ds.instances[i].tokens;
    if t.is_empty() {
        alloc::vec![ds.empty_token()]
    } else {
        t.clone()
    }
}

/// Instance order for one epoch: file order, or a shuffle that is a pure
/// function of `(seed, epoch)`.
pub fn epoch_order(len: usize, shuffle: bool, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ mix_seed(epoch as u64 + 1)));
        order.shuffle(&mut rng);
    }
    order
}

/// Every instance exactly once, in batches of at most `batch_size`.
pub fn batch_iter(ds: &Dataset, batch_size: usize, shuffle: bool, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let order = epoch_order(ds.len(), shuffle, seed, epoch);
    Ok(order.chunks(batch_size).map(|c| Batch::build(ds, c)).collect())
}

/// Seeded random split into parts with the given proportions (normalized).
pub fn split(ds: &Dataset, proportions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    let total: f64 = proportions.iter().sum();
    if proportions.is_empty() || proportions.iter().any(|&p| !(p >= 0.0)) || !(total > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid split proportions {proportions:?}")));
    }
    let order = epoch_order(ds.len(), true, seed, 0);
    let mut parts = Vec::with_capacity(proportions.len());
    let mut start = 0usize;
    let mut acc = 0.0;
    for (k, &p) in proportions.iter().enumerate() {
        acc += p;
        let end = if k + 1 == proportions.len() { ds.len() } else { libm::round(acc / total * ds.len() as f64) as usize };
        let end = end.clamp(start, ds.len());
        let mut idx = order[start..end].to_vec();
        idx.sort_unstable();
        parts.push(ds.subset(&idx));
        start = end;
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn toy(m: usize) -> Dataset {
        let instances = (0..m).map(|i| Instance { tokens: (0..1 + i % 4).collect(), labels: vec![i % 3] }).collect();
        Dataset::new(InputType::Sequential, 3, 10, instances).unwrap()
    }

    #[test]
    fn batch_sizes_cover_the_dataset() {
        let ds = toy(70);
        let sizes: Vec<usize> = batch_iter(&ds, 32, true, 1, 0).unwrap().iter().map(Batch::len).collect();
        assert_eq!(sizes, [32, 32, 6]);
    }

    #[test]
    fn unshuffled_batches_follow_file_order() {
        let ds = toy(10);
        let b = batch_iter(&ds, 4, false, 9, 3).unwrap();
        assert_eq!(b[0].indices, [0, 1, 2, 3]);
        assert_eq!(b[2].indices, [8, 9]);
    }

    #[test]
    fn shuffles_are_reproducible_and_epoch_salted() {
        let a0 = epoch_order(50, true, 7, 0);
        let a1 = epoch_order(50, true, 7, 1);
        assert_eq!(a0, epoch_order(50, true, 7, 0));
        assert_eq!(a1, epoch_order(50, true, 7, 1));
        assert_ne!(a0, a1);
    }

    #[test]
    fn padding_and_mask_agree() {
        let ds = toy(6);
        for b in batch_iter(&ds, 6, false, 0, 0).unwrap() {
            for r in 0..b.len() {
                let real = ds.instances[b.indices[r]].tokens.len();
                assert_eq!(b.mask[r].iter().filter(|&&m| m).count(), real);
                assert_eq!(b.row_tokens(r), &ds.instances[b.indices[r]].tokens[..]);
                assert!(b.tokens[r][real..].iter().all(|&t| t == PAD));
            }
        }
    }

    #[test]
    fn cardinality_is_mean_label_count() {
        let instances = vec![
            Instance { tokens: vec![1], labels: vec![0, 1] },
            Instance { tokens: vec![1], labels: vec![0, 1, 2] },
            Instance { tokens: vec![1], labels: vec![2] },
        ];
        let ds = Dataset::new(InputType::BinaryVector, 3, 2, instances).unwrap();
        let s = dataset_stats(&ds);
        assert_eq!((s.instances, s.labels, s.cardinality), (3, 3, 2.0));
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let bad = vec![Instance { tokens: vec![1], labels: vec![3] }];
        assert!(Dataset::new(InputType::BinaryVector, 3, 2, bad).is_err());
        let bad = vec![Instance { tokens: vec![2], labels: vec![] }];
        assert!(Dataset::new(InputType::BinaryVector, 3, 2, bad).is_err());
    }

    #[test]
    fn empty_instances_get_a_placeholder_token() {
        let ds = Dataset::new(InputType::BinaryVector, 2, 4, vec![Instance { tokens: vec![], labels: vec![] }]).unwrap();
        assert_eq!(model_tokens(&ds, 0), [4]);
        assert_eq!(ds.vocab_size(), 5);
    }

    #[test]
    fn split_partitions_instances() {
        let ds = toy(101);
        let parts = split(&ds, &[0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!(parts.iter().map(Dataset::len).sum::<usize>(), 101);
        assert_eq!(parts[0].len(), 61);
        assert_eq!(split(&ds, &[0.6, 0.2, 0.2], 3).unwrap(), parts);
    }

    proptest! {
        #[test]
        fn every_instance_once_per_epoch(m in 1usize..120, bs in 1usize..40, seed in 0u64..50, epoch in 0usize..5) {
            let ds = toy(m);
            let batches = batch_iter(&ds, bs, true, seed, epoch).unwrap();
            let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
            prop_assert!(batches.iter().all(|b| b.len() <= bs));
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..m).collect::<Vec<_>>());
        }
    }
}
