use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported spherical harmonics degree {0} (maximum is 4)")]
    UnsupportedDegree(usize),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("numeric divergence at iteration {iteration}: loss term `{term}` is {value}")]
    Divergence {
        iteration: usize,
        term: &'static str,
        value: f64,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Innermost error, looking through pipeline stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code for the command-line contract:
    /// 2 invalid input, 3 numeric divergence, 4 I/O failure.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::InvalidInput(_) | Error::UnsupportedDegree(_) | Error::Format(_) => 2,
            Error::Divergence { .. } => 3,
            Error::Io(_) => 4,
            Error::Internal(_) | Error::Stage { .. } => 1,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
