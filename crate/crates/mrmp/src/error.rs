//! Error type for the command-line layer. Every variant maps to a process
//! exit code and renders as one `key=value` line.

use std::fmt;
use std::path::PathBuf;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{0}")]
    Format(String),
    #[error("degenerate dataset: {0}")]
    Degenerate(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("label count mismatch: {0}")]
    LabelMismatch(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(mrmp_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Parse { .. } | CliError::Format(_) => 2,
            CliError::Degenerate(_) => 3,
            CliError::NonFinite(_) => 4,
            CliError::LabelMismatch(_) => 5,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                mrmp_core::Error::NonFinite { .. } => 4,
                mrmp_core::Error::LabelCountMismatch { .. } => 5,
                mrmp_core::Error::EmptyDataset => 3,
                mrmp_core::Error::InvalidArgument(_) => 2,
                _ => 1,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Parse { .. } => "parse",
            CliError::Format(_) => "format",
            CliError::Degenerate(_) => "degenerate",
            CliError::NonFinite(_) => "non_finite",
            CliError::LabelMismatch(_) => "label_mismatch",
            CliError::Io { .. } => "io",
            CliError::Core(_) => "core",
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        CliError::Parse { path: path.into(), line, message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// `error code=<n> kind=<kind> msg="<escaped message>"`.
    pub fn machine_line(&self) -> MachineLine<'_> {
        MachineLine(self)
    }
}

impl From<mrmp_core::Error> for CliError {
    fn from(e: mrmp_core::Error) -> Self {
        CliError::Core(e)
    }
}

pub struct MachineLine<'a>(&'a CliError);

impl fmt::Display for MachineLine<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.0.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n");
        write!(f, "error code={} kind={} msg=\"{}\"", self.0.exit_code(), self.0.kind(), msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn machine_line_is_single_line_and_escaped() {
        let e = CliError::Config("bad \"value\"\nsecond".into());
        let s = e.machine_line().to_string();
        assert_eq!(s, r#"error code=2 kind=config msg="bad \"value\"\nsecond""#);
        assert!(!s.contains('\n'));
    }

    #[test]
    fn core_errors_map_to_documented_codes() {
        assert_eq!(CliError::from(mrmp_core::Error::NonFinite { op: "x" }).exit_code(), 4);
        assert_eq!(CliError::from(mrmp_core::Error::LabelCountMismatch { expected: 1, found: 2 }).exit_code(), 5);
        assert_eq!(CliError::Degenerate("x".into()).exit_code(), 3);
    }
}
