//! Text formats: sparse and sequence datasets, vocabularies, graph edge lists.

pub mod graph;
pub mod sequence;
pub mod sparse;

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{CliError, Result};

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    BufReader::new(File::open(path).map_err(|e| CliError::io(path, e))?)
        .read_to_string(&mut s)
        .map_err(|e| CliError::io(path, e))?;
    Ok(s)
}

/// Lines of a text file with `\r` stripped; a final newline does not start
/// an extra line.
pub(crate) fn lines(text: &str) -> Vec<&str> {
    let mut v: Vec<&str> = text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l)).collect();
    if v.last() == Some(&"") {
        v.pop();
    }
    v
}

/// Comma-separated label indices; an empty field is an empty set.
pub(crate) fn parse_label_field(field: &str) -> std::result::Result<Vec<usize>, String> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| format!("bad label index {:?}", s)))
        .collect()
}

pub(crate) fn write_label_field(labels: &[usize], out: &mut String) {
    for (k, l) in labels.iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        out.push_str(&l.to_string());
    }
}
