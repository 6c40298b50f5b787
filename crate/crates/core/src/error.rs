use thiserror::Error;

pub type Result<T> = std::result::Result<T, SigmarError>;

#[derive(Debug, Error)]
pub enum SigmarError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Parameters outside the admissible set (nonpositive determinant,
    /// explosive transition, nonpositive variance).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SigmarError {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            SigmarError::Numerical(_) | SigmarError::Generation(_) => 3,
            _ => 2,
        }
    }

    /// Prefix the message with `ctx`, keeping the variant.
    pub fn context(self, ctx: &str) -> Self {
        use SigmarError::*;
        match self {
            Dimension(m) => Dimension(format!("{ctx}: {m}")),
            Domain(m) => Domain(format!("{ctx}: {m}")),
            Numerical(m) => Numerical(format!("{ctx}: {m}")),
            Degenerate(m) => Degenerate(format!("{ctx}: {m}")),
            Generation(m) => Generation(format!("{ctx}: {m}")),
            Validation(m) => Validation(format!("{ctx}: {m}")),
            other => other,
        }
    }
}
