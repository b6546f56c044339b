//! Error categories and their exit codes.
//!
//! The binary prints `error[<category>]: <message>` on stderr and exits with
//! the category's code, so scripts can branch without parsing messages.

use std::path::Path;

use esplit_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("missing input {0}")]
    MissingInput(String),
    #[error("{0}")]
    InvalidInput(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Transport(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("{0}")]
    Internal(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::MissingInput(_) => "missing-input",
            CliError::InvalidInput(_) => "invalid-input",
            CliError::Diverged(_) => "diverged",
            CliError::Transport(_) => "transport",
            CliError::Mismatch(_) => "mismatch",
            CliError::Internal(_) => "internal",
        }
    }

    /// 2 is also what argument parsing uses for unknown flags.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::MissingInput(_) => 4,
            CliError::InvalidInput(_) => 5,
            CliError::Diverged(_) => 6,
            CliError::Transport(_) => 7,
            CliError::Mismatch(_) => 8,
            CliError::Internal(_) => 1,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingInput(path.display().to_string())
        } else {
            CliError::Internal(format!("{}: {e}", path.display()))
        }
    }

    /// Core error raised while reading `path`.
    pub fn from_core_at(path: &Path, e: CoreError) -> Self {
        match e {
            CoreError::Io(io) => Self::io(path, io),
            other => match Self::from(other) {
                CliError::InvalidInput(m) => CliError::InvalidInput(format!("{}: {m}", path.display())),
                c => c,
            },
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Config(_) => CliError::Config(msg),
            CoreError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::MissingInput(msg),
            CoreError::Checkpoint(_) | CoreError::Csv(_) | CoreError::Json(_) => CliError::InvalidInput(msg),
            CoreError::Diverged(_) => CliError::Diverged(msg),
            CoreError::Transport(_)
            | CoreError::Framing(_)
            | CoreError::Crc { .. }
            | CoreError::UnsupportedCodec(_)
            | CoreError::Truncated(_) => CliError::Transport(msg),
            CoreError::Shape(_) | CoreError::InvalidArgument(_) => CliError::InvalidInput(msg),
            _ => CliError::Internal(msg),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct() {
        let all = [
            CliError::Usage(String::new()),
            CliError::Config(String::new()),
            CliError::MissingInput(String::new()),
            CliError::InvalidInput(String::new()),
            CliError::Diverged(String::new()),
            CliError::Transport(String::new()),
            CliError::Mismatch(String::new()),
            CliError::Internal(String::new()),
        ];
        let mut codes: Vec<i32> = all.iter().map(CliError::exit_code).collect();
        codes.sort();
        codes.dedup();
        assert_eq!(codes.len(), all.len());
        assert!(!codes.contains(&0));
    }

    #[test]
    fn core_errors_map_to_categories() {
        assert_eq!(CliError::from(CoreError::Checkpoint("x".into())).category(), "invalid-input");
        assert_eq!(CliError::from(CoreError::Crc { expected: 1, actual: 2 }).category(), "transport");
        assert_eq!(CliError::from(CoreError::Config("x".into())).exit_code(), 3);
        let nf = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(CliError::from_core_at(Path::new("a.ckpt"), CoreError::Io(nf)).exit_code(), 4);
    }
}
