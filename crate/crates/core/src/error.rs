use thiserror::Error;

/// Errors raised by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: length {len} does not fit a {rows}x{cols} matrix")]
    Length {
        op: &'static str,
        len: usize,
        rows: usize,
        cols: usize,
    },

    #[error("non-finite value at index {index} in {context}")]
    NonFinite { context: &'static str, index: usize },

    #[error("SVD did not converge after {iterations} sweeps")]
    SvdNonConvergence { iterations: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate factor: {0}")]
    DegenerateFactor(String),

    #[error("perturbation state error: {0}")]
    State(String),

    #[error("invalid configuration: {}", format_issues(.0))]
    Config(Vec<ConfigIssue>),

    #[error("numerical failure at step {step}: {detail}")]
    Numerical { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One problem found while validating a configuration, tied to the offending key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub field: String,
    pub message: String,
}

impl ConfigIssue {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

fn format_issues(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("{}: {}", i.field, i.message))
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
