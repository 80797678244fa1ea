use serde_json::{json, Value};
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mcgan_core::Error),

    /// An upstream artifact is missing.
    #[error("missing {}; run `mcgan {producer}` first", artifact.display())]
    Dependency { artifact: PathBuf, producer: &'static str },

    #[error("{0}")]
    Usage(String),

    #[error("server error: {0}")]
    Server(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Dependency { .. } => "dependency",
            CliError::Usage(_) => "usage",
            CliError::Server(_) => "server",
        }
    }

    /// Machine-readable form printed on failure.
    pub fn to_json(&self, subcommand: &str) -> Value {
        let mut err = json!({
            "code": self.code(),
            "message": self.to_string(),
            "subcommand": subcommand,
        });
        if let CliError::Dependency { artifact, producer } = self {
            err["artifact"] = json!(artifact);
            err["producer"] = json!(producer);
        }
        json!({ "error": err })
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Dependency { .. } => 3,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(mcgan_core::Error::io(PathBuf::new(), e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}
