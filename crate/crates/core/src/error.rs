use thiserror::Error;

pub type Result<T> = std::result::Result<T, RrlError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RrlError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A conjugate argument fell outside the finite domain of φ*.
    #[error("conjugate argument {argument} leaves the finite domain of phi* ({context})")]
    Domain { argument: f64, context: String },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("nominal support of size {0} exceeds the grid oracle limit of 4")]
    UnsupportedSize(usize),

    #[error("{row}: probabilities sum to {sum}")]
    Stochasticity { row: String, sum: f64 },

    #[error("fail state {state}: {reason}")]
    FailState { state: usize, reason: String },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("normal equations are singular (ridge = 0 and rank-deficient features)")]
    SingularSystem,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("every transfer probe has a vanishing denominator")]
    AllProbesDegenerate,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        source: Box<RrlError>,
    },
}

impl RrlError {
    pub fn context(self, context: impl Into<String>) -> Self {
        RrlError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with all context layers stripped.
    pub fn root(&self) -> &RrlError {
        match self {
            RrlError::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            RrlError::Domain { .. } | RrlError::NonConvergence { .. } | RrlError::SingularSystem
        )
    }
}
