//! Relation graph edge lists.
//!
//! ```text
//! labels=<L> alpha=<α>
//! <i> <j> <+|->
//! ```
//!
//! Zero-based, `i < j`, one undirected edge per line, sorted by `(i, j)`.

use std::path::Path;

use mrmp_core::relgraph::{RelationGraph, RelationKind};

use super::{lines, read_to_string};
use crate::error::{CliError, Result};

pub fn serialize_graph(g: &RelationGraph) -> String {
    let mut edges: Vec<(usize, usize, RelationKind)> = RelationKind::ALL
        .iter()
        .flat_map(|&k| g.edges(k).into_iter().map(move |(i, j)| (i, j, k)))
        .collect();
    edges.sort_by_key(|&(i, j, _)| (i, j));
    let mut out = format!("labels={} alpha={}\n", g.num_labels(), g.alpha);
    for (i, j, k) in edges {
        out.push_str(&format!("{i} {j} {}\n", k.symbol()));
    }
    out
}

pub fn write_graph(g: &RelationGraph, path: &Path) -> Result<()> {
    std::fs::write(path, serialize_graph(g)).map_err(|e| CliError::io(path, e))
}

pub fn read_graph(path: &Path) -> Result<RelationGraph> {
    parse_graph(&read_to_string(path)?, path)
}

pub fn parse_graph(text: &str, origin: &Path) -> Result<RelationGraph> {
    let lines = lines(text);
    let header = lines.first().ok_or_else(|| CliError::parse(origin, 1, "missing header"))?;
    let bad_header = || CliError::parse(origin, 1, format!("malformed header {header:?}, expected `labels=<L> alpha=<a>`"));
    let mut labels = None;
    let mut alpha = None;
    for field in header.split_whitespace() {
        match field.split_once('=') {
            Some(("labels", v)) => labels = Some(v.parse::<usize>().map_err(|_| bad_header())?),
            Some(("alpha", v)) => alpha = Some(v.parse::<f64>().map_err(|_| bad_header())?),
            _ => return Err(bad_header()),
        }
    }
    let (Some(l), Some(alpha)) = (labels, alpha) else { return Err(bad_header()) };
    let mut edges = Vec::new();
    let mut prev: Option<(usize, usize)> = None;
    for (k, line) in lines[1..].iter().enumerate() {
        let lineno = k + 2;
        let err = |msg: String| CliError::parse(origin, lineno, msg);
        let f: Vec<&str> = line.split_whitespace().collect();
        let [i, j, s] = f.as_slice() else { return Err(err(format!("expected `<i> <j> <+|->`, got {line:?}"))) };
        let i: usize = i.parse().map_err(|_| err(format!("bad label {i:?}")))?;
        let j: usize = j.parse().map_err(|_| err(format!("bad label {j:?}")))?;
        let kind = match *s {
            "+" => RelationKind::Pulling,
            "-" => RelationKind::Pushing,
            _ => return Err(err(format!("bad relation {s:?}"))),
        };
        if i >= j || j >= l {
            return Err(err(format!("edge ({i}, {j}) needs i < j < {l}")));
        }
        if prev.is_some_and(|p| p >= (i, j)) {
            return Err(err(format!("edge ({i}, {j}) is duplicated or out of order")));
        }
        prev = Some((i, j));
        edges.push((i, j, kind));
    }
    let mut g = RelationGraph::from_edges(l, &edges)?;
    g.alpha = alpha;
    Ok(g)
}

/// `degree,pulling,pushing` counts of labels per degree.
pub fn degree_histogram(g: &RelationGraph) -> String {
    let dp = g.degrees(RelationKind::Pulling);
    let dn = g.degrees(RelationKind::Pushing);
    let max = dp.iter().chain(&dn).copied().max().unwrap_or(0);
    let mut out = String::from("degree,pulling,pushing\n");
    for d in 0..=max {
        let c = |v: &[usize]| v.iter().filter(|&&x| x == d).count();
        out.push_str(&format!("{d},{},{}\n", c(&dp), c(&dn)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut g = RelationGraph::from_edges(
            5,
            &[(3, 4, RelationKind::Pushing), (0, 1, RelationKind::Pulling), (0, 3, RelationKind::Pushing)],
        )
        .unwrap();
        g.alpha = 0.01;
        let text = serialize_graph(&g);
        assert_eq!(text, "labels=5 alpha=0.01\n0 1 +\n0 3 -\n3 4 -\n");
        let back = parse_graph(&text, Path::new("g")).unwrap();
        assert_eq!(serialize_graph(&back), text);
        for k in RelationKind::ALL {
            assert_eq!(back.edges(k), g.edges(k));
        }
        assert_eq!(back.alpha, 0.01);
    }

    #[test]
    fn rejects_malformed_input() {
        for (text, line) in [
            ("labels=3\n", 1),
            ("labels=3 alpha=0.05\n1 0 +\n", 2),
            ("labels=3 alpha=0.05\n0 3 +\n", 2),
            ("labels=3 alpha=0.05\n0 1 *\n", 2),
            ("labels=3 alpha=0.05\n0 1 +\n0 1 -\n", 3),
            ("labels=3 alpha=0.05\n0 2 +\n0 1 +\n", 3),
        ] {
            match parse_graph(text, Path::new("g")) {
                Err(CliError::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn histogram_counts_labels_per_degree() {
        let g = RelationGraph::from_edges(3, &[(0, 1, RelationKind::Pulling)]).unwrap();
        assert_eq!(degree_histogram(&g), "degree,pulling,pushing\n0,1,3\n1,2,0\n");
    }
}
