use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain specification: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("linear solver failure: {0}")]
    SolverFailure(String),

    #[error("perturbation too large: {0}")]
    PerturbationTooLarge(String),

    #[error("geometry not supported: {0}")]
    GeometryUnsupported(String),

    #[error("every perturbation direction is tangent to the boundary")]
    AllDirectionsTangent,

    #[error("time grid of {nt} steps cannot be split into {windows} equal windows")]
    BadTimeDivision { nt: usize, windows: usize },

    #[error("no root of the insensitizing system found (best residual {best_residual:.3e})")]
    NoSolutionFound { best_residual: f64 },

    #[error("verification failed: {0}")]
    VerificationFailed(String),

    #[error("cutoff transition band too thin: {cells:.2} cells (need at least {required})")]
    BandTooThin { cells: f64, required: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{stage}: {source}")]
    Context {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Innermost error beneath any context layers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            e => e,
        }
    }
}

/// Attaches a stage name to an error.
pub trait Context<T> {
    fn context(self, stage: &str) -> Result<T>;
}

impl<T> Context<T> for Result<T> {
    fn context(self, stage: &str) -> Result<T> {
        self.map_err(|e| Error::Context {
            stage: stage.to_string(),
            source: Box::new(e),
        })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
