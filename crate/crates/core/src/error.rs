use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: argument {value} outside the function domain")]
    Domain { op: &'static str, value: f64 },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite {term} loss at epoch {epoch}, step {step}")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("{path}: {} malformed line(s): {}", problems.len(), format_problems(problems))]
    Ingest {
        path: String,
        problems: Vec<(usize, String)>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_problems(problems: &[(usize, String)]) -> String {
    problems
        .iter()
        .map(|(line, msg)| format!("line {line}: {msg}"))
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
