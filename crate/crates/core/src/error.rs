use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate state label `{0}`")]
    DuplicateState(String),
    #[error("duplicate transition {from} -> {to}")]
    DuplicateTransition { from: String, to: String },
    #[error("self-loop transition on state `{0}`")]
    SelfLoop(String),
    #[error("unknown state `{0}`")]
    UnknownState(String),

    #[error("invalid trajectory for individual {id}: {reason}")]
    InvalidTrajectory { id: String, reason: String },
    #[error("individual {id}: transition {from} -> {to} is not in the state graph")]
    IllegalTransition { id: String, from: String, to: String },
    #[error("invalid policy {id}: {reason}")]
    InvalidPolicy { id: String, reason: String },
    #[error("no covariates for individual {0}")]
    MissingIndividual(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("rank-deficient design; dependent columns: {columns:?}")]
    Collinear { columns: Vec<String> },
    #[error("IRLS did not converge after {iterations} iterations")]
    Diverged { iterations: usize },
    #[error("transition {transition}: {source}")]
    InTransition {
        transition: String,
        #[source]
        source: Box<Error>,
    },
    #[error("unknown level `{level}` for categorical `{covariate}`")]
    UnknownLevel { covariate: String, level: String },
    #[error("covariate `{0}` missing from query")]
    MissingCovariate(String),
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("covariate `{covariate}` has the wrong kind: expected {expected}")]
    CovariateKind { covariate: String, expected: &'static str },

    #[error("generator norm {norm} exceeds the supported bound")]
    NumericalOverflow { norm: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pricing mode/model mismatch: {0}")]
    ModeModelMismatch(String),
    #[error("empty sample")]
    EmptySample,
    #[error("sensitive levels {found:?} do not match fit-time levels {expected:?}")]
    LevelMismatch { expected: Vec<String>, found: Vec<String> },
    #[error("covariate `{0}` is categorical; transport needs continuous covariates")]
    NonContinuous(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("need at least two sensitive groups, found {0}")]
    InsufficientGroups(usize),

    #[error("{path}: row {row}: {message}")]
    Parse { path: String, row: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// The underlying error, looking through per-transition context.
    pub fn root(&self) -> &Error {
        match self {
            Error::InTransition { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
