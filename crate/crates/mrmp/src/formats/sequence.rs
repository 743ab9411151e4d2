//! Tokenized text: one instance per line, `labels<TAB>tok tok tok`.
//! Vocabulary files hold one token per line; line `k` (0-based) is id
//! `k + 2`, after PAD and UNK.

use std::collections::HashMap;
use std::path::Path;

use mrmp_core::data::{Dataset, InputType, Instance, UNK};

use super::{lines, parse_label_field, read_to_string, write_label_field};
use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut v = Self { ids: HashMap::new(), tokens: Vec::new() };
        for t in tokens {
            if !v.ids.contains_key(&t) {
                v.ids.insert(t.clone(), v.tokens.len() + 2);
                v.tokens.push(t);
            }
        }
        v
    }

    /// Entries plus PAD and UNK.
    pub fn size(&self) -> usize {
        self.tokens.len() + 2
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

pub fn read_vocabulary(path: &Path) -> Result<Vocabulary> {
    parse_vocabulary(&read_to_string(path)?, path)
}

pub fn parse_vocabulary(text: &str, origin: &Path) -> Result<Vocabulary> {
    let mut tokens = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (k, line) in lines(text).into_iter().enumerate() {
        let tok = line.trim();
        if tok.is_empty() || tok.contains(char::is_whitespace) {
            return Err(CliError::parse(origin, k + 1, format!("vocabulary entry must be one token, got {line:?}")));
        }
        if !seen.insert(tok.to_string()) {
            return Err(CliError::parse(origin, k + 1, format!("duplicate vocabulary entry {tok:?}")));
        }
        tokens.push(tok.to_string());
    }
    Ok(Vocabulary::from_tokens(tokens))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceOptions {
    /// Label count; inferred as one past the largest label seen when absent.
    pub num_labels: Option<usize>,
    pub max_seq_len: usize,
}

impl Default for SequenceOptions {
    fn default() -> Self {
        Self { num_labels: None, max_seq_len: 500 }
    }
}

pub fn read_sequence(path: &Path, vocab_path: &Path, options: &SequenceOptions) -> Result<Dataset> {
    let vocab = read_vocabulary(vocab_path)?;
    parse_sequence(&read_to_string(path)?, path, &vocab, options)
}

pub fn parse_sequence(text: &str, origin: &Path, vocab: &Vocabulary, options: &SequenceOptions) -> Result<Dataset> {
    let mut instances = Vec::new();
    let mut truncated = 0usize;
    for (k, line) in lines(text).into_iter().enumerate() {
        let err = |msg: String| CliError::parse(origin, k + 1, msg);
        if line.trim().is_empty() {
            return Err(err("empty line".into()));
        }
        let (labels, body) = line.split_once('\t').ok_or_else(|| err("missing tab between labels and tokens".into()))?;
        let labels = parse_label_field(labels).map_err(err)?;
        if let Some(l) = options.num_labels {
            if let Some(&bad) = labels.iter().find(|&&j| j >= l) {
                return Err(err(format!("label {bad} out of range for {l} labels")));
            }
        }
        let mut tokens: Vec<usize> = body.split_whitespace().map(|t| vocab.id(t)).collect();
        if tokens.len() > options.max_seq_len {
            tokens.truncate(options.max_seq_len);
            truncated += 1;
        }
        instances.push(Instance { tokens, labels });
    }
    if truncated > 0 {
        log::info!("{}: {truncated} sequences truncated to {} tokens", origin.display(), options.max_seq_len);
    }
    let num_labels = options
        .num_labels
        .unwrap_or_else(|| instances.iter().flat_map(|i| i.labels.iter().copied()).max().map_or(0, |m| m + 1));
    Ok(Dataset::new(InputType::Sequential, num_labels, vocab.size(), instances)?)
}

/// Writes `ds` with token ids mapped back through `vocab`; PAD and UNK are
/// written as `<pad>` and `<unk>`.
pub fn serialize_sequence(ds: &Dataset, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for inst in &ds.instances {
        write_label_field(&inst.labels, &mut out);
        out.push('\t');
        for (k, &t) in inst.tokens.iter().enumerate() {
            if k > 0 {
                out.push(' ');
            }
            out.push_str(match t {
                0 => "<pad>",
                1 => "<unk>",
                t => &vocab.tokens[t - 2],
            });
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        parse_vocabulary("grain\nwheat\nexport\n", Path::new("v")).unwrap()
    }

    #[test]
    fn maps_tokens_through_vocabulary() {
        let ds = parse_sequence("0\tgrain wheat export\n", Path::new("d"), &vocab(), &SequenceOptions::default()).unwrap();
        assert_eq!(ds.instances[0].tokens, vec![2, 3, 4]);
        assert_eq!(ds.instances[0].labels, vec![0]);
        assert_eq!(ds.num_features, 5);
        assert_eq!(ds.num_labels, 1);
    }

    #[test]
    fn unknown_tokens_become_unk() {
        let ds = parse_sequence("1,2\tgrain corn\n", Path::new("d"), &vocab(), &SequenceOptions::default()).unwrap();
        assert_eq!(ds.instances[0].tokens, vec![2, UNK]);
        assert_eq!(ds.num_labels, 3);
    }

    #[test]
    fn long_lines_keep_the_prefix() {
        let body: Vec<&str> = (0..30_000).map(|i| ["grain", "wheat", "export"][i % 3]).collect();
        let text = format!("0\t{}\n", body.join(" "));
        let ds = parse_sequence(&text, Path::new("d"), &vocab(), &SequenceOptions::default()).unwrap();
        assert_eq!(ds.instances[0].tokens.len(), 500);
        assert_eq!(&ds.instances[0].tokens[..4], &[2, 3, 4, 2]);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        let o = SequenceOptions { num_labels: Some(2), ..SequenceOptions::default() };
        let line = |s: &str| match parse_sequence(s, Path::new("d"), &vocab(), &o) {
            Err(CliError::Parse { line, .. }) => line,
            other => panic!("{other:?}"),
        };
        assert_eq!(line("0\tgrain\n\n1\twheat\n"), 2);
        assert_eq!(line("0 grain\n"), 1);
        assert_eq!(line("0\tgrain\n2\twheat\n"), 2);
        assert_eq!(line("x\tgrain\n"), 1);
    }

    #[test]
    fn missing_vocabulary_file_is_an_io_error() {
        let r = read_sequence(Path::new("/nonexistent/d"), Path::new("/nonexistent/v"), &SequenceOptions::default());
        assert!(matches!(r, Err(CliError::Io { .. })));
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_blank_lines() {
        assert!(parse_vocabulary("a\nb\na\n", Path::new("v")).is_err());
        assert!(parse_vocabulary("a\n\nb\n", Path::new("v")).is_err());
    }

    #[test]
    fn round_trip_through_text() {
        let v = vocab();
        let o = SequenceOptions { num_labels: Some(3), ..SequenceOptions::default() };
        let text = "0\tgrain wheat\n\texport <unk>\n1,2\t\n";
        let ds = parse_sequence(text, Path::new("d"), &v, &o).unwrap();
        assert_eq!(serialize_sequence(&ds, &v), text);
    }
}
