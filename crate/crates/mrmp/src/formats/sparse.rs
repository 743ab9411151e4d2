//! Sparse multi-label format.
//!
//! ```text
//! M F L
//! l1,l2 f:v f:v ...
//! ```
//!
//! The header gives the instance, feature and label counts. Each following
//! line is one instance: an optional comma-separated label list, then
//! `feature:value` pairs separated by whitespace. A line starting with
//! whitespace (or with a pair) has no labels. Only feature presence is
//! kept; pairs with value 0 are dropped.

use std::io::Write;
use std::path::Path;

use mrmp_core::data::{Dataset, InputType, Instance};

use super::{lines, parse_label_field, read_to_string, write_label_field};
use crate::error::{CliError, Result};

pub fn read_sparse(path: &Path) -> Result<Dataset> {
    parse_sparse(&read_to_string(path)?, path)
}

/// Parses sparse text; `origin` only labels error messages.
pub fn parse_sparse(text: &str, origin: &Path) -> Result<Dataset> {
    let lines = lines(text);
    let header = lines.first().ok_or_else(|| CliError::parse(origin, 1, "missing header"))?;
    let counts: Vec<usize> = header
        .split_whitespace()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::parse(origin, 1, format!("malformed header {header:?}, expected `M F L`")))?;
    let &[m, f, l] = counts.as_slice() else {
        return Err(CliError::parse(origin, 1, format!("malformed header {header:?}, expected `M F L`")));
    };
    if lines.len() - 1 != m {
        return Err(CliError::parse(
            origin,
            lines.len().max(2),
            format!("header declares {m} instances, file has {}", lines.len() - 1),
        ));
    }
    let mut instances = Vec::with_capacity(m);
    for (k, line) in lines[1..].iter().enumerate() {
        let lineno = k + 2;
        let err = |msg: String| CliError::parse(origin, lineno, msg);
        let mut fields = line.split_whitespace().peekable();
        let starts_with_labels = !line.starts_with(char::is_whitespace) && fields.peek().is_some_and(|t| !t.contains(':'));
        let labels = if starts_with_labels { parse_label_field(fields.next().unwrap_or("")).map_err(err)? } else { Vec::new() };
        if let Some(&bad) = labels.iter().find(|&&j| j >= l) {
            return Err(err(format!("label {bad} out of range for {l} labels")));
        }
        let mut tokens = Vec::new();
        for pair in fields {
            let (fid, val) = pair.split_once(':').ok_or_else(|| err(format!("expected feature:value, got {pair:?}")))?;
            let fid: usize = fid.parse().map_err(|_| err(format!("bad feature id {fid:?}")))?;
            let val: f64 = val.parse().map_err(|_| err(format!("bad feature value {val:?}")))?;
            if fid >= f {
                return Err(err(format!("feature {fid} out of range for {f} features")));
            }
            if val != 0.0 {
                tokens.push(fid);
            }
        }
        let n = tokens.len();
        tokens.sort_unstable();
        tokens.dedup();
        if tokens.len() != n {
            log::warn!("{}:{lineno}: duplicate feature ids, deduplicated", origin.display());
        }
        instances.push(Instance { tokens, labels });
    }
    Ok(Dataset::new(InputType::BinaryVector, l, f, instances)?)
}

/// Writes `ds` in the sparse format with every value set to 1.
pub fn serialize_sparse(ds: &Dataset) -> String {
    let mut out = format!("{} {} {}\n", ds.len(), ds.num_features, ds.num_labels);
    for inst in &ds.instances {
        write_label_field(&inst.labels, &mut out);
        for t in &inst.tokens {
            out.push(' ');
            out.push_str(&t.to_string());
            out.push_str(":1");
        }
        out.push('\n');
    }
    out
}

pub fn write_sparse(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(serialize_sparse(ds).as_bytes()))
        .map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(s: &str) -> Result<Dataset> {
        parse_sparse(s, Path::new("t"))
    }

    #[test]
    fn header_and_instance() {
        let ds = parse("1 10 4\n1,3 5:1 9:1\n").unwrap();
        assert_eq!((ds.len(), ds.num_features, ds.num_labels), (1, 10, 4));
        assert_eq!(ds.instances[0].labels, vec![1, 3]);
        assert_eq!(ds.instances[0].tokens, vec![5, 9]);
    }

    #[test]
    fn empty_label_field_is_legal() {
        let ds = parse("2 10 4\n  2:1\n3:0.5\n").unwrap();
        assert!(ds.instances[0].labels.is_empty());
        assert_eq!(ds.instances[0].tokens, vec![2]);
        assert_eq!(ds.instances[1].tokens, vec![3]);
    }

    #[test]
    fn duplicates_are_merged_and_zeros_dropped() {
        let ds = parse("1 10 4\n0 4:1 4:2 6:0\n").unwrap();
        assert_eq!(ds.instances[0].tokens, vec![4]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let line = |s: &str| match parse(s) {
            Err(CliError::Parse { line, .. }) => line,
            other => panic!("{other:?}"),
        };
        assert_eq!(line("3 10\n"), 1);
        assert_eq!(line("2 10 4\n0 1:1\n0 12:1\n"), 3);
        assert_eq!(line("1 10 4\n4 1:1\n"), 2);
        assert_eq!(line("1 10 4\n0 1\n"), 2);
        assert_eq!(line("1 10 4\n0 x:1\n"), 2);
        assert_eq!(line("2 10 4\n0 1:1\n"), 2);
        assert_eq!(line(""), 1);
    }

    proptest! {
        #[test]
        fn round_trip(rows in proptest::collection::vec(
            (proptest::collection::vec(0usize..5, 0..4), proptest::collection::vec(0usize..20, 0..6)), 0..12)) {
            let instances = rows.into_iter().map(|(labels, tokens)| Instance { tokens, labels }).collect();
            let ds = Dataset::new(InputType::BinaryVector, 5, 20, instances).unwrap();
            let text = serialize_sparse(&ds);
            let back = parse(&text).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(serialize_sparse(&back), text);
        }
    }
}
