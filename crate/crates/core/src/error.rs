use thiserror::Error;

/// Errors raised by measure construction, integration, kernel construction
/// and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown measure `{0}`")]
    UnknownMeasure(String),

    #[error("parameter out of range for {measure}: {reason}")]
    ParameterOutOfRange { measure: String, reason: String },

    #[error("divergent moment: {0}")]
    DivergentMoment(String),

    #[error("moment budget insufficient: need moments of order {needed}, finite only below {budget}")]
    MomentBudget { needed: f64, budget: f64 },

    #[error("singular covariance (smallest eigenvalue {0:e})")]
    SingularCovariance(f64),

    #[error("no sampler available for {0}")]
    NoSampler(String),

    #[error("rejection sampler acceptance rate {rate:e} below 1e-3 ({accepted} of {proposed} proposals)")]
    RejectionRate { rate: f64, accepted: usize, proposed: usize },

    #[error("truncation sweep did not converge after {0} doublings")]
    TruncationSweep(usize),

    #[error("quadrature tolerance not met: error estimate {error:e} > {tolerance:e} after {nodes} nodes")]
    QuadratureTolerance { error: f64, tolerance: f64, nodes: usize },

    #[error("measure is not centered: |mean| = {0:e}")]
    NotCentered(f64),

    #[error("measure is not isotropic: {0}")]
    NotIsotropic(String),

    #[error("stein kernel undefined: {0}")]
    KernelUndefined(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("ill-conditioned system (condition estimate {cond:e}): {hint}")]
    IllConditioned { cond: f64, hint: String },

    #[error("linear solve failed: {0}")]
    SolveFailed(String),

    #[error("eigen-solver failure: {0}")]
    Eigen(String),

    #[error("aliasing in convolution: edge mass {0:e}")]
    Aliasing(f64),

    #[error("insufficient samples: {got} < {needed}")]
    InsufficientSamples { got: usize, needed: usize },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("normalization violated: {0}")]
    Normalization(String),

    #[error("fisher information unstable under grid refinement ({coarse:e} vs {fine:e})")]
    FisherInconsistent { coarse: f64, fine: f64 },

    #[error("expression error at column {column}: {message}")]
    Expression { column: usize, message: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// `line` 0 marks errors with no position in the file.
    #[error("config error{}: {message}", position(*.line, *.column))]
    Config { line: usize, column: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn precondition(msg: impl Into<String>) -> Error {
    Error::Precondition(msg.into())
}

fn position(line: usize, column: usize) -> String {
    if line == 0 {
        String::new()
    } else {
        format!(" at line {line}, column {column}")
    }
}
