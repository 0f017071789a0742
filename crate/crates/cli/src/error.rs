use std::path::PathBuf;

use thiserror::Error;

/// Failures surfaced by the command-line harness, each mapped to an exit
/// code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    BadInput { path: PathBuf, message: String },
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn config(key: impl Into<String>, message: impl std::fmt::Display) -> Self {
        Self::Config {
            key: key.into(),
            message: message.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for configuration, 3 for I/O and unreadable inputs, 4 for broken
    /// invariants.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } => 2,
            Self::Io { .. } | Self::BadInput { .. } => 3,
            Self::Invariant(_) => 4,
        }
    }

    /// Classifies an engine error raised while processing `path`.
    pub fn from_core(err: elip_core::Error, key: &str, path: Option<&std::path::Path>) -> Self {
        use elip_core::Error as E;
        match err {
            E::Config(m) | E::Argument(m) => Self::config(key, m),
            E::Io(source) => Self::io(path.map(PathBuf::from).unwrap_or_default(), source),
            E::Input(m) => Self::BadInput {
                path: path.map(PathBuf::from).unwrap_or_default(),
                message: m,
            },
            E::Weights(w) => Self::BadInput {
                path: path.map(PathBuf::from).unwrap_or_default(),
                message: w.to_string(),
            },
            other @ (E::Shape { .. } | E::Degenerate(_)) => Self::Invariant(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
