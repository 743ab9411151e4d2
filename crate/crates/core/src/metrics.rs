//! Multi-label evaluation: subset accuracy, example-based, micro and macro
//! F1, per-label ROC AUC and validation threshold tuning.

use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};

/// Default threshold grid: 0.05, 0.10, …, 0.95.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

/// `scores[m][j] > threshold`.
pub fn binarize(scores: &[Vec<f64>], threshold: f64) -> Vec<Vec<bool>> {
    scores.iter().map(|row| row.iter().map(|&s| s > threshold).collect()).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `2tp / (2tp + fp + fn)`, or 1 when the denominator is zero.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }
}

fn check_shapes<A, B>(y: &[Vec<A>], p: &[Vec<B>]) -> Result<usize> {
    if y.len() != p.len() {
        return Err(shape_err!("evaluate", "{} truth rows vs {} prediction rows", y.len(), p.len()));
    }
    let l = y.first().map_or(0, Vec::len);
    for (a, b) in y.iter().zip(p) {
        if a.len() != l || b.len() != l {
            return Err(shape_err!("evaluate", "rows of length {} and {} for {l} labels", a.len(), b.len()));
        }
    }
    Ok(l)
}

/// Per-label confusion counts.
pub fn confusion_counts(y: &[Vec<bool>], y_hat: &[Vec<bool>]) -> Result<Vec<ConfusionCounts>> {
    let l = check_shapes(y, y_hat)?;
    let mut counts = alloc::vec![ConfusionCounts::default(); l];
    for (yr, pr) in y.iter().zip(y_hat) {
        for ((c, &t), &p) in counts.iter_mut().zip(yr).zip(pr) {
            match (t, p) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
    }
    Ok(counts)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SetMetrics {
    pub acc: f64,
    pub ebf1: f64,
    pub mif1: f64,
    pub maf1: f64,
}

impl SetMetrics {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Acc => self.acc,
            Metric::EbF1 => self.ebf1,
            Metric::MiF1 => self.mif1,
            Metric::MaF1 => self.maf1,
        }
    }
}

/// ACC, ebF1, miF1 and maF1 of binary predictions. An instance with no true
/// and no predicted labels scores ebF1 1; likewise a label with
/// `2tp + fp + fn = 0` scores F1 1.
pub fn evaluate(y: &[Vec<bool>], y_hat: &[Vec<bool>]) -> Result<SetMetrics> {
    let counts = confusion_counts(y, y_hat)?;
    let m = y.len();
    if m == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut exact = 0usize;
    let mut eb = 0.0;
    for (yr, pr) in y.iter().zip(y_hat) {
        exact += (yr == pr) as usize;
        let both = yr.iter().zip(pr).filter(|(&a, &b)| a && b).count();
        let den = yr.iter().filter(|&&a| a).count() + pr.iter().filter(|&&b| b).count();
        eb += if den == 0 { 1.0 } else { (2 * both) as f64 / den as f64 };
    }
    let pooled = counts.iter().fold(ConfusionCounts::default(), |acc, c| ConfusionCounts {
        tp: acc.tp + c.tp,
        fp: acc.fp + c.fp,
        tn: acc.tn + c.tn,
        fn_: acc.fn_ + c.fn_,
    });
    let maf1 = if counts.is_empty() { 1.0 } else { counts.iter().map(ConfusionCounts::f1).sum::<f64>() / counts.len() as f64 };
    Ok(SetMetrics { acc: exact as f64 / m as f64, ebf1: eb / m as f64, mif1: pooled.f1(), maf1 })
}

/// ROC AUC of one label from the Mann–Whitney statistic with average ranks,
/// so tied scores contribute ½. `None` without both classes present.
pub fn auc(truth: &[bool], scores: &[f64]) -> Option<f64> {
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 || truth.len() != scores.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Positions i..=j share the average of ranks i+1..=j+1.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| truth[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUC for every label column; undefined labels are `None`.
pub fn auc_per_label(y: &[Vec<bool>], scores: &[Vec<f64>]) -> Result<Vec<Option<f64>>> {
    let l = check_shapes(y, scores)?;
    Ok((0..l)
        .map(|j| {
            let t: Vec<bool> = y.iter().map(|r| r[j]).collect();
            let s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
            auc(&t, &s)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Acc,
    EbF1,
    MiF1,
    MaF1,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Acc, Metric::EbF1, Metric::MiF1, Metric::MaF1];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Acc => "acc",
            Metric::EbF1 => "ebf1",
            Metric::MiF1 => "mif1",
            Metric::MaF1 => "maf1",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }
}

/// Grid-searches the global threshold maximizing `metric`. Among equal
/// scores the threshold nearest 0.5 wins, the lower one on a distance tie.
/// Returns `(threshold, metric value)`.
pub fn tune_threshold(y: &[Vec<bool>], scores: &[Vec<f64>], metric: Metric, grid: &[f64]) -> Result<(f64, f64)> {
    if y.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if grid.is_empty() || grid.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::InvalidArgument("threshold grid must be non-empty and inside (0, 1)".into()));
    }
    let mut best: Option<(f64, f64)> = None;
    for &t in grid {
        let v = evaluate(y, &binarize(scores, t))?.get(metric);
        best = match best {
            None => Some((t, v)),
            Some((bt, bv)) => {
                let (d, bd) = ((t - 0.5).abs(), (bt - 0.5).abs());
                let closer = d < bd - 1e-12 || ((d - bd).abs() <= 1e-12 && t < bt);
                if v > bv || (v == bv && closer) {
                    Some((t, v))
                } else {
                    Some((bt, bv))
                }
            }
        };
    }
    Ok(best.expect("grid is non-empty"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Metric value and the threshold used for it.
    pub values: Vec<(Metric, f64, f64)>,
    pub auc: Vec<Option<f64>>,
}

impl MetricsReport {
    /// Scores `scores` with one threshold per metric.
    pub fn compute(y: &[Vec<bool>], scores: &[Vec<f64>], thresholds: &[(Metric, f64)]) -> Result<Self> {
        let mut values = Vec::with_capacity(thresholds.len());
        for &(metric, t) in thresholds {
            values.push((metric, evaluate(y, &binarize(scores, t))?.get(metric), t));
        }
        Ok(Self { values, auc: auc_per_label(y, scores)? })
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.values.iter().find(|v| v.0 == metric).map(|v| v.1)
    }

    pub fn mean_auc(&self) -> Option<f64> {
        let defined: Vec<f64> = self.auc.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(rows: &[&[u8]]) -> Vec<Vec<bool>> {
        rows.iter().map(|r| r.iter().map(|&v| v == 1).collect()).collect()
    }

    #[test]
    fn binarize_is_strict() {
        assert_eq!(binarize(&[vec![0.5]], 0.5), vec![vec![false]]);
        assert_eq!(binarize(&[vec![0.2, 0.4]], 0.3), vec![vec![false, true]]);
        assert_eq!(binarize(&[vec![1e-9, 0.3]], 1e-12), vec![vec![true, true]]);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let y = b(&[&[1, 0, 1], &[0, 0, 0], &[0, 1, 0]]);
        let m = evaluate(&y, &y).unwrap();
        assert_eq!((m.acc, m.ebf1, m.mif1, m.maf1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn example_based_f1_hand_case() {
        let m = evaluate(&b(&[&[1, 0, 1, 0]]), &b(&[&[1, 1, 1, 0]])).unwrap();
        assert!((m.ebf1 - 0.8).abs() < 1e-15);
        assert_eq!(m.acc, 0.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[true, false], &[0.9, 0.1]), Some(1.0));
        assert_eq!(auc(&[true, false], &[0.1, 0.9]), Some(0.0));
        assert_eq!(auc(&[true, true, false, false], &[0.9, 0.5, 0.5, 0.1]), Some(0.875));
        assert_eq!(auc(&[true, true], &[0.9, 0.5]), None);
    }

    #[test]
    fn tuning_examples() {
        let y = b(&[&[1, 0], &[0, 1], &[1, 1]]);
        let s: Vec<Vec<f64>> = y.iter().map(|r| r.iter().map(|&v| v as u8 as f64).collect()).collect();
        for m in Metric::ALL {
            assert_eq!(tune_threshold(&y, &s, m, &default_threshold_grid()).unwrap().0, 0.5);
        }
        // Positives scored 0.4 are only recovered below 0.4; negatives sit
        // at 0.3, so 0.35 separates them and every higher grid point misses.
        let y = b(&[&[1, 0], &[0, 1], &[1, 0], &[0, 1]]);
        let s = vec![vec![0.4, 0.3], vec![0.3, 0.4], vec![0.4, 0.3], vec![0.3, 0.4]];
        let grid = default_threshold_grid();
        let (t, v) = tune_threshold(&y, &s, Metric::EbF1, &grid).unwrap();
        let values: Vec<(f64, f64)> = grid.iter().map(|&t| (t, evaluate(&y, &binarize(&s, t)).unwrap().ebf1)).collect();
        let top = values.iter().map(|x| x.1).fold(f64::MIN, f64::max);
        let oracle = values
            .iter()
            .filter(|x| x.1 == top)
            .map(|x| x.0)
            .min_by(|a, b| (a - 0.5).abs().total_cmp(&(b - 0.5).abs()))
            .unwrap();
        let at_half = values.iter().find(|x| (x.0 - 0.5).abs() < 1e-12).unwrap().1;
        assert!(top > at_half);
        assert!((t - 0.35).abs() < 1e-12 && (oracle - 0.35).abs() < 1e-12);
        assert_eq!(v, evaluate(&y, &binarize(&s, t)).unwrap().ebf1);
        assert!(tune_threshold(&[], &[], Metric::Acc, &grid).is_err());
    }

    fn random_case(rng: &mut ChaCha8Rng, m: usize, l: usize) -> (Vec<Vec<bool>>, Vec<Vec<bool>>) {
        let mut draw = || (0..m).map(|_| (0..l).map(|_| rng.random_bool(0.3)).collect()).collect();
        (draw(), draw())
    }

    #[test]
    fn counts_partition_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (y, p) = random_case(&mut rng, 50, 8);
        for c in confusion_counts(&y, &p).unwrap() {
            assert_eq!(c.total(), 50);
        }
    }

    proptest! {
        #[test]
        fn auc_is_invariant_to_monotone_maps(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..30);
            let truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..6) as f64) / 5.0).collect();
            let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auc(&truth, &scores), auc(&truth, &mapped));
        }

        #[test]
        fn tuned_threshold_dominates_grid(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<Vec<bool>> = (0..12).map(|_| (0..4).map(|_| rng.random_bool(0.4)).collect()).collect();
            let s: Vec<Vec<f64>> = (0..12).map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let grid = default_threshold_grid();
            for m in Metric::ALL {
                let (_, best) = tune_threshold(&y, &s, m, &grid).unwrap();
                for &t in &grid {
                    prop_assert!(evaluate(&y, &binarize(&s, t)).unwrap().get(m) <= best);
                }
            }
        }
    }
}
