//! Harness failures and their exit codes.

use serde::Serialize;

use robust_rrl::RrlError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Bad config, bad model file, bad arguments.
    #[error("config error: {0}")]
    Config(String),
    /// A solver failed to converge or hit a degenerate system.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type HarnessResult<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => EXIT_CONFIG,
            HarnessError::Numerical(_) => EXIT_NUMERICAL,
            HarnessError::Io(_) => EXIT_IO,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Numerical(_) => "numerical",
            HarnessError::Io(_) => "io",
        }
    }

    pub fn message(&self) -> String {
        match self {
            HarnessError::Config(m) | HarnessError::Numerical(m) | HarnessError::Io(m) => m.clone(),
        }
    }

    /// The machine-readable error document printed on failure.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            error: &'a str,
            message: String,
            exit_code: i32,
        }
        serde_json::to_string(&Doc {
            error: self.kind(),
            message: self.message(),
            exit_code: self.exit_code(),
        })
        .expect("error documents serialize")
    }

    pub fn context(self, context: &str) -> Self {
        match self {
            HarnessError::Config(m) => HarnessError::Config(format!("{context}: {m}")),
            HarnessError::Numerical(m) => HarnessError::Numerical(format!("{context}: {m}")),
            HarnessError::Io(m) => HarnessError::Io(format!("{context}: {m}")),
        }
    }
}

impl From<RrlError> for HarnessError {
    fn from(e: RrlError) -> Self {
        if e.is_numerical() {
            HarnessError::Numerical(e.to_string())
        } else {
            HarnessError::Config(e.to_string())
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}
