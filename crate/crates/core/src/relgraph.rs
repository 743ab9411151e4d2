//! Pulling / pushing label graphs from pairwise dependence tests.
//!
//! Every unordered label pair gets a 2×2 contingency table over the training
//! instances. A Pearson chi-squared test of independence (one degree of
//! freedom) decides whether the pair is dependent; a dependent pair becomes a
//! *pulling* edge when `P(j | i) > P(j)` and a *pushing* edge otherwise.
//! Pairs in which either label is constant carry no pairwise information and
//! never get an edge.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::special::chi2_df1_critical;
use crate::{Scalar, Tensor};

/// Binary label matrix stored as the sorted positive label ids of each instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    num_labels: usize,
    rows: Vec<Vec<usize>>,
}

impl LabelMatrix {
    pub fn new(num_labels: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        let mut rows = rows;
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
            if let Some(&last) = row.last() {
                if last >= num_labels {
                    return Err(Error::IndexOutOfRange { what: "label set", index: last, size: num_labels });
                }
            }
        }
        Ok(Self { num_labels, rows })
    }

    /// From dense 0/1 rows (instance-major).
    pub fn from_dense(num_labels: usize, dense: &[Vec<u8>]) -> Result<Self> {
        let rows = dense
            .iter()
            .map(|r| r.iter().enumerate().filter(|(_, &v)| v != 0).map(|(j, _)| j).collect())
            .collect();
        Self::new(num_labels, rows)
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn num_instances(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, m: usize) -> &[usize] {
        &self.rows[m]
    }

    pub fn get(&self, m: usize, label: usize) -> bool {
        self.rows[m].binary_search(&label).is_ok()
    }

    /// Number of instances carrying each label.
    pub fn label_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_labels];
        for row in &self.rows {
            for &j in row {
                counts[j] += 1;
            }
        }
        counts
    }
}

/// Counts for a label pair `(i, j)`: `n11` both present, `n10` only `i`,
/// `n01` only `j`, `n00` neither.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ContingencyTable {
    pub n11: u64,
    pub n10: u64,
    pub n01: u64,
    pub n00: u64,
}

impl ContingencyTable {
    pub fn new(n11: u64, n10: u64, n01: u64, n00: u64) -> Self {
        Self { n11, n10, n01, n00 }
    }

    pub fn total(&self) -> u64 {
        self.n11 + self.n10 + self.n01 + self.n00
    }

    /// The table of `(j, i)`.
    pub fn transpose(&self) -> Self {
        Self { n11: self.n11, n10: self.n01, n01: self.n10, n00: self.n00 }
    }

    /// Row sums (`i` present, absent) and column sums (`j` present, absent).
    pub fn marginals(&self) -> [u64; 4] {
        [self.n11 + self.n10, self.n01 + self.n00, self.n11 + self.n01, self.n10 + self.n00]
    }

    pub fn has_zero_marginal(&self) -> bool {
        self.marginals().contains(&0)
    }

    /// `P(j | i) > P(j)`, evaluated exactly as `n11 · M > (n11 + n10)(n11 + n01)`.
    /// The condition is symmetric in `i` and `j`.
    pub fn positively_associated(&self) -> bool {
        let m = self.total() as u128;
        (self.n11 as u128) * m > ((self.n11 + self.n10) as u128) * ((self.n11 + self.n01) as u128)
    }
}

/// Tallies the pair `(i, j)` over all instances.
pub fn build_contingency(labels: &LabelMatrix, i: usize, j: usize) -> Result<ContingencyTable> {
    let l = labels.num_labels();
    if i == j {
        return Err(Error::InvalidArgument(format!("contingency table needs two distinct labels, got {i} twice")));
    }
    for idx in [i, j] {
        if idx >= l {
            return Err(Error::IndexOutOfRange { what: "label", index: idx, size: l });
        }
    }
    if labels.num_instances() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut t = ContingencyTable::default();
    for m in 0..labels.num_instances() {
        match (labels.get(m, i), labels.get(m, j)) {
            (true, true) => t.n11 += 1,
            (true, false) => t.n10 += 1,
            (false, true) => t.n01 += 1,
            (false, false) => t.n00 += 1,
        }
    }
    Ok(t)
}

/// Pearson chi-squared statistic `M (n11 n00 − n10 n01)² / (r1 r0 c1 c0)`,
/// optionally with Yates' continuity correction.
pub fn chi_squared_statistic(table: &ContingencyTable, yates: bool) -> Result<f64> {
    if table.has_zero_marginal() {
        return Err(Error::ZeroMarginal);
    }
    let [r1, r0, c1, c0] = table.marginals().map(|v| v as f64);
    let m = table.total() as f64;
    let cross = table.n11 as f64 * table.n00 as f64 - table.n10 as f64 * table.n01 as f64;
    let mut diff = cross.abs();
    if yates {
        diff = (diff - m / 2.0).max(0.0);
    }
    Ok(m * diff * diff / (r1 * r0 * c1 * c0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    None,
    Pulling,
    Pushing,
}

/// Reusable test configuration: significance level and its critical value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DependenceTest {
    pub alpha: f64,
    pub critical: f64,
    pub yates: bool,
}

impl DependenceTest {
    pub fn new(alpha: f64, yates: bool) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("significance level {alpha} outside (0, 1)")));
        }
        Ok(Self { alpha, critical: chi2_df1_critical(alpha), yates })
    }

    pub fn classify(&self, table: &ContingencyTable) -> Relation {
        let Ok(stat) = chi_squared_statistic(table, self.yates) else {
            return Relation::None;
        };
        if stat <= self.critical {
            Relation::None
        } else if table.positively_associated() {
            Relation::Pulling
        } else {
            Relation::Pushing
        }
    }
}

/// Classifies one table at significance `alpha` without continuity correction.
pub fn classify_relation(table: &ContingencyTable, alpha: f64) -> Result<Relation> {
    Ok(DependenceTest::new(alpha, false)?.classify(table))
}

/// Index into the per-relation arrays of a [`RelationGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RelationKind {
    Pulling = 0,
    Pushing = 1,
}

impl RelationKind {
    pub const ALL: [RelationKind; 2] = [RelationKind::Pulling, RelationKind::Pushing];

    pub fn symbol(self) -> char {
        match self {
            RelationKind::Pulling => '+',
            RelationKind::Pushing => '-',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationKind::Pulling => "pulling",
            RelationKind::Pushing => "pushing",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub tests_performed: usize,
    pub skipped_zero_marginal: usize,
    /// Every label constant over the training instances.
    pub degenerate: bool,
}

/// Symmetric, zero-diagonal, mutually disjoint pulling and pushing adjacency
/// over `L` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationGraph {
    num_labels: usize,
    neighbors: [Vec<Vec<usize>>; 2],
    pub alpha: f64,
    pub stats: BuildStats,
}

impl RelationGraph {
    pub fn empty(num_labels: usize) -> Self {
        Self {
            num_labels,
            neighbors: [vec![Vec::new(); num_labels], vec![Vec::new(); num_labels]],
            alpha: 0.05,
            stats: BuildStats::default(),
        }
    }

    /// Builds a graph from explicit undirected edges.
    pub fn from_edges(num_labels: usize, edges: &[(usize, usize, RelationKind)]) -> Result<Self> {
        let mut g = Self::empty(num_labels);
        for &(i, j, kind) in edges {
            g.insert(i, j, kind)?;
        }
        Ok(g)
    }

    fn insert(&mut self, i: usize, j: usize, kind: RelationKind) -> Result<()> {
        let l = self.num_labels;
        if i >= l || j >= l {
            return Err(Error::IndexOutOfRange { what: "graph label", index: i.max(j), size: l });
        }
        if i == j {
            return Err(Error::InvalidArgument(format!("self edge on label {i}")));
        }
        let other = match kind {
            RelationKind::Pulling => RelationKind::Pushing,
            RelationKind::Pushing => RelationKind::Pulling,
        };
        if self.has_edge(other, i, j) {
            return Err(Error::InvalidArgument(format!("labels {i} and {j} already share a {} edge", other.name())));
        }
        if self.has_edge(kind, i, j) {
            return Ok(());
        }
        for (a, b) in [(i, j), (j, i)] {
            let list = &mut self.neighbors[kind as usize][a];
            let pos = list.binary_search(&b).unwrap_err();
            list.insert(pos, b);
        }
        Ok(())
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn has_edge(&self, kind: RelationKind, i: usize, j: usize) -> bool {
        self.neighbors[kind as usize][i].binary_search(&j).is_ok()
    }

    /// Graph neighbors of `i` (no self loop), sorted.
    pub fn neighbors(&self, kind: RelationKind, i: usize) -> &[usize] {
        &self.neighbors[kind as usize][i]
    }

    pub fn degree(&self, kind: RelationKind, i: usize) -> usize {
        self.neighbors[kind as usize][i].len()
    }

    pub fn degrees(&self, kind: RelationKind) -> Vec<usize> {
        (0..self.num_labels).map(|i| self.degree(kind, i)).collect()
    }

    /// Message-passing neighborhood: graph neighbors in both edge directions
    /// plus `i` itself.
    pub fn message_neighborhood(&self, kind: RelationKind, i: usize) -> Vec<usize> {
        let mut n = self.neighbors(kind, i).to_vec();
        let pos = n.binary_search(&i).unwrap_err();
        n.insert(pos, i);
        n
    }

    pub fn edge_count(&self, kind: RelationKind) -> usize {
        self.neighbors[kind as usize].iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn is_edgeless(&self) -> bool {
        RelationKind::ALL.iter().all(|&k| self.edge_count(k) == 0)
    }

    /// Edges `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self, kind: RelationKind) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.num_labels {
            for &j in self.neighbors(kind, i) {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Dense L×L adjacency, optionally with ones on the diagonal.
    pub fn adjacency<S: Scalar>(&self, kind: RelationKind, self_loops: bool) -> Tensor<S> {
        let l = self.num_labels;
        let mut t = Tensor::zeros([l, l]);
        let data = t.data_mut();
        for i in 0..l {
            for &j in self.neighbors(kind, i) {
                data[i * l + j] = S::one();
            }
            if self_loops {
                data[i * l + i] = S::one();
            }
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphOptions {
    pub alpha: f64,
    pub yates: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self { alpha: 0.05, yates: false }
    }
}

/// Tests every unordered label pair once and records the resulting edges.
pub fn build_relation_graphs(labels: &LabelMatrix, options: &GraphOptions) -> Result<RelationGraph> {
    let l = labels.num_labels();
    let m = labels.num_instances() as u64;
    if l < 2 {
        return Err(Error::InvalidArgument(format!("need at least two labels, got {l}")));
    }
    if m == 0 {
        return Err(Error::EmptyDataset);
    }
    let test = DependenceTest::new(options.alpha, options.yates)?;
    let counts = labels.label_counts();

    // co-occurrence counts, upper triangle
    let mut co = vec![0u64; l * l];
    for row in 0..labels.num_instances() {
        let pos = labels.row(row);
        for (a, &i) in pos.iter().enumerate() {
            for &j in &pos[a + 1..] {
                co[i * l + j] += 1;
            }
        }
    }

    let mut graph = RelationGraph::empty(l);
    graph.alpha = options.alpha;
    let mut stats = BuildStats::default();
    for i in 0..l {
        for j in i + 1..l {
            let n11 = co[i * l + j];
            let table = ContingencyTable::new(n11, counts[i] - n11, counts[j] - n11, m + n11 - counts[i] - counts[j]);
            stats.tests_performed += 1;
            if table.has_zero_marginal() {
                stats.skipped_zero_marginal += 1;
                continue;
            }
            let kind = match test.classify(&table) {
                Relation::None => continue,
                Relation::Pulling => RelationKind::Pulling,
                Relation::Pushing => RelationKind::Pushing,
            };
            graph.insert(i, j, kind)?;
        }
    }
    stats.degenerate = counts.iter().all(|&c| c == 0 || c == m);
    if stats.degenerate {
        log::warn!("every label is constant over {m} instances; relation graphs are empty");
    }
    graph.stats = stats;
    Ok(graph)
}

/// One degree bucket of a relation graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DegreeGroup {
    /// Smallest and largest degree present, `None` when the bucket is empty.
    pub degree_range: Option<(usize, usize)>,
    pub labels: Vec<usize>,
}

/// Buckets labels by degree: group 0 holds the degree-0 labels and the
/// positive-degree labels are split into `n_groups - 1` contiguous quantile
/// buckets. A label with degree `d` lands in bucket
/// `1 + ⌊(n_groups - 1) · #{positive degrees < d} / #{positive degrees}⌋`,
/// so equal degrees always share a bucket.
pub fn node_degree_groups(graph: &RelationGraph, kind: RelationKind, n_groups: usize) -> Vec<DegreeGroup> {
    group_by_degree(&graph.degrees(kind), n_groups)
}

/// [`node_degree_groups`] over an explicit degree sequence.
pub fn group_by_degree(degrees: &[usize], n_groups: usize) -> Vec<DegreeGroup> {
    let n_groups = n_groups.max(1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    if n_groups == 1 {
        groups[0] = (0..degrees.len()).collect();
    } else {
        let mut positive: Vec<usize> = degrees.iter().copied().filter(|&d| d > 0).collect();
        positive.sort_unstable();
        let buckets = n_groups - 1;
        for (label, &d) in degrees.iter().enumerate() {
            if d == 0 {
                groups[0].push(label);
            } else {
                let below = positive.partition_point(|&p| p < d);
                groups[1 + buckets * below / positive.len()].push(label);
            }
        }
    }
    groups
        .into_iter()
        .map(|labels| {
            let degree_range = labels.iter().map(|&i| degrees[i]).fold(None, |acc: Option<(usize, usize)>, d| {
                Some(acc.map_or((d, d), |(lo, hi)| (lo.min(d), hi.max(d))))
            });
            DegreeGroup { degree_range, labels }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn columns(l: usize, cols: &[&[u8]]) -> LabelMatrix {
        let m = cols[0].len();
        let dense: Vec<Vec<u8>> = (0..m).map(|r| cols.iter().map(|c| c[r]).collect()).collect();
        LabelMatrix::from_dense(l, &dense).unwrap()
    }

    #[test]
    fn contingency_direct_count() {
        let y = columns(2, &[&[1, 1, 0], &[1, 0, 0]]);
        assert_eq!(build_contingency(&y, 0, 1).unwrap(), ContingencyTable::new(1, 1, 0, 1));
        let z = columns(2, &[&[0, 0, 0], &[1, 0, 1]]);
        let t = build_contingency(&z, 0, 1).unwrap();
        assert_eq!((t.n11, t.n10), (0, 0));
        assert!(build_contingency(&y, 1, 1).is_err());
        let empty = LabelMatrix::new(2, Vec::new()).unwrap();
        assert_eq!(build_contingency(&empty, 0, 1), Err(Error::EmptyDataset));
    }

    #[test]
    fn statistic_worked_values() {
        let s = |a, b, c, d| chi_squared_statistic(&ContingencyTable::new(a, b, c, d), false).unwrap();
        assert_eq!(s(25, 25, 25, 25), 0.0);
        assert!((s(30, 10, 10, 50) - 34.027_777_777_777_78).abs() < 1e-9);
        assert!((s(0, 40, 40, 20) - 44.444_444_444_444_44).abs() < 1e-9);
        assert_eq!(chi_squared_statistic(&ContingencyTable::new(0, 0, 5, 5), false), Err(Error::ZeroMarginal));
    }

    #[test]
    fn classification_worked_values() {
        let c = |a, b, c, d| classify_relation(&ContingencyTable::new(a, b, c, d), 0.05).unwrap();
        assert_eq!(c(25, 25, 25, 25), Relation::None);
        assert_eq!(c(30, 10, 10, 50), Relation::Pulling);
        assert_eq!(c(0, 40, 40, 20), Relation::Pushing);
        assert_eq!(c(40, 0, 0, 60), Relation::Pulling);
        assert_eq!(c(0, 0, 40, 60), Relation::None);
        assert!(classify_relation(&ContingencyTable::new(1, 1, 1, 1), 0.0).is_err());
        assert!(classify_relation(&ContingencyTable::new(1, 1, 1, 1), 1.0).is_err());
    }

    #[test]
    fn copy_and_exclusive_pairs() {
        let a: Vec<u8> = (0..100).map(|k| (k < 40) as u8).collect();
        let copy = columns(2, &[&a, &a]);
        let g = build_relation_graphs(&copy, &GraphOptions::default()).unwrap();
        assert_eq!(g.edges(RelationKind::Pulling), vec![(0, 1)]);
        assert_eq!(g.edge_count(RelationKind::Pushing), 0);

        let b: Vec<u8> = (0..100).map(|k| (40..80).contains(&k) as u8).collect();
        let excl = columns(2, &[&a, &b]);
        let g = build_relation_graphs(&excl, &GraphOptions::default()).unwrap();
        assert_eq!(g.edges(RelationKind::Pushing), vec![(0, 1)]);
        assert_eq!(g.edge_count(RelationKind::Pulling), 0);
    }

    #[test]
    fn degenerate_dataset_gives_empty_graph() {
        let ones = [1u8; 10];
        let zeros = [0u8; 10];
        let y = columns(3, &[&ones, &zeros, &ones]);
        let g = build_relation_graphs(&y, &GraphOptions::default()).unwrap();
        assert!(g.is_edgeless());
        assert!(g.stats.degenerate);
        assert_eq!(g.stats.tests_performed, 3);
        assert_eq!(g.stats.skipped_zero_marginal, 3);
    }

    #[test]
    fn neighborhoods_carry_self_loops() {
        let g = RelationGraph::from_edges(4, &[(0, 1, RelationKind::Pulling), (0, 2, RelationKind::Pushing)]).unwrap();
        assert_eq!(g.message_neighborhood(RelationKind::Pulling, 0), vec![0, 1]);
        assert_eq!(g.message_neighborhood(RelationKind::Pulling, 1), vec![0, 1]);
        assert_eq!(g.message_neighborhood(RelationKind::Pushing, 0), vec![0, 2]);
        assert_eq!(g.message_neighborhood(RelationKind::Pushing, 2), vec![0, 2]);
        assert_eq!(g.message_neighborhood(RelationKind::Pushing, 3), vec![3]);
        assert_eq!(g.message_neighborhood(RelationKind::Pulling, 3), vec![3]);
        assert!(RelationGraph::from_edges(3, &[(0, 1, RelationKind::Pulling), (1, 0, RelationKind::Pushing)]).is_err());
    }

    #[test]
    fn degree_groups_exact_example() {
        let groups = group_by_degree(&[0, 0, 1, 1, 3, 7], 4);
        let labels: Vec<Vec<usize>> = groups.iter().map(|g| g.labels.clone()).collect();
        assert_eq!(labels, vec![vec![0, 1], vec![2, 3], vec![4], vec![5]]);
        assert_eq!(groups[3].degree_range, Some((7, 7)));
    }

    #[test]
    fn degree_groups_of_edgeless_graph() {
        let g = RelationGraph::empty(5);
        let groups = node_degree_groups(&g, RelationKind::Pushing, 4);
        assert_eq!(groups.len(), 4);
        assert_eq!(groups[0].labels, vec![0, 1, 2, 3, 4]);
        assert_eq!(groups.iter().filter(|g| !g.labels.is_empty()).count(), 1);
        assert_eq!(groups.iter().map(|g| g.labels.len()).sum::<usize>(), 5);
    }
}
