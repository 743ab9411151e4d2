//! Seeded synthetic corpora for smoke tests and the acceptance experiments.

use mrmp_core::data::{Dataset, InputType, Instance};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Instances draw `draws` tokens uniformly from `num_features` (duplicates
/// merged); label `j` is on exactly when token `j` is present.
pub fn token_copy(instances: usize, num_labels: usize, num_features: usize, draws: usize, seed: u64) -> Dataset {
    assert!(num_labels <= num_features);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..instances)
        .map(|_| {
            let mut tokens: Vec<usize> = (0..draws).map(|_| rng.random_range(0..num_features)).collect();
            tokens.sort_unstable();
            tokens.dedup();
            let labels = tokens.iter().copied().filter(|&t| t < num_labels).collect();
            Instance { tokens, labels }
        })
        .collect();
    Dataset::new(InputType::BinaryVector, num_labels, num_features, rows).expect("generated ids in range")
}

/// Labels of [`planted`]: pairs that always co-occur, pairs that never do,
/// and labels drawn independently.
pub const PLANTED_PULLING: [(usize, usize); 2] = [(0, 1), (2, 3)];
pub const PLANTED_PUSHING: [(usize, usize); 2] = [(4, 5), (6, 7)];
pub const PLANTED_INDEPENDENT: [usize; 2] = [8, 9];
pub const PLANTED_LABELS: usize = 10;
const SIGNATURE: usize = 3;
const NOISE_TOKENS: usize = 20;
pub const PLANTED_FEATURES: usize = PLANTED_LABELS * SIGNATURE + NOISE_TOKENS;

/// Corpus with planted label relations. Each co-occurring pair switches on
/// together with probability 0.3; each exclusive pair has exactly one member
/// on with probability 0.6; independent labels are on with probability 0.3.
/// Label `j` owns tokens `3j..3j+3`; an active label emits each of its
/// tokens with probability 0.5, an inactive one leaks each with probability
/// 0.03, and four tokens are drawn from a shared noise pool.
pub fn planted(instances: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..instances)
        .map(|_| {
            let mut on = [false; PLANTED_LABELS];
            for &(a, b) in &PLANTED_PULLING {
                if rng.random_bool(0.3) {
                    on[a] = true;
                    on[b] = true;
                }
            }
            for &(a, b) in &PLANTED_PUSHING {
                if rng.random_bool(0.6) {
                    on[*[a, b].choose(&mut rng).expect("non-empty")] = true;
                }
            }
            for &j in &PLANTED_INDEPENDENT {
                on[j] = rng.random_bool(0.3);
            }
            let mut tokens = Vec::new();
            for (j, &active) in on.iter().enumerate() {
                let p = if active { 0.5 } else { 0.03 };
                for t in SIGNATURE * j..SIGNATURE * (j + 1) {
                    if rng.random_bool(p) {
                        tokens.push(t);
                    }
                }
            }
            for _ in 0..4 {
                tokens.push(PLANTED_LABELS * SIGNATURE + rng.random_range(0..NOISE_TOKENS));
            }
            let labels = (0..PLANTED_LABELS).filter(|&j| on[j]).collect();
            Instance { tokens, labels }
        })
        .collect();
    Dataset::new(InputType::BinaryVector, PLANTED_LABELS, PLANTED_FEATURES, rows).expect("generated ids in range")
}

/// Independent Bernoulli labels with per-label rates drawn from `[0.05, 0.6]`.
pub fn random_labels(instances: usize, num_labels: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rates: Vec<f64> = (0..num_labels).map(|_| rng.random_range(0.05..0.6)).collect();
    (0..instances).map(|_| (0..num_labels).filter(|&j| rng.random_bool(rates[j])).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_copy_labels_follow_tokens() {
        let ds = token_copy(50, 10, 30, 6, 0);
        assert_eq!(ds.len(), 50);
        for inst in &ds.instances {
            let expect: Vec<usize> = inst.tokens.iter().copied().filter(|&t| t < 10).collect();
            assert_eq!(inst.labels, expect);
        }
        assert_eq!(ds, token_copy(50, 10, 30, 6, 0));
    }

    #[test]
    fn planted_relations_hold() {
        let ds = planted(400, 1);
        let y = ds.dense_labels();
        for row in &y {
            for &(a, b) in &PLANTED_PULLING {
                assert_eq!(row[a], row[b]);
            }
            for &(a, b) in &PLANTED_PUSHING {
                assert!(!(row[a] && row[b]));
            }
        }
        assert!(y.iter().any(|r| r[0]) && y.iter().any(|r| r[4]) && y.iter().any(|r| r[8]));
    }
}
