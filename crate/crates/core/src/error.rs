use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("asset {asset} has no observations on {date}")]
    MissingDay { asset: String, date: NaiveDate },

    #[error("need at least {needed} intraday returns, got {got}")]
    InsufficientObservations { needed: usize, got: usize },

    #[error("grid mismatch: asset {asset} has {got} returns, expected {expected}")]
    GridMismatch {
        asset: usize,
        expected: usize,
        got: usize,
    },

    #[error("non-positive variance for asset {asset}")]
    DegenerateVariance { asset: usize },

    #[error("design matrix is rank deficient at column `{column}`")]
    RankDeficient { column: String },

    #[error("solver failed after {iterations} iterations (duality gap {gap:.3e})")]
    SolverFailure { iterations: usize, gap: f64 },

    #[error("bootstrap degenerate: {skipped} of {requested} replicates skipped")]
    BootstrapDegenerate { skipped: usize, requested: usize },

    #[error("misaligned dates: {0}")]
    Alignment(String),

    #[error("portfolio variance {0:.3e} is negative beyond tolerance")]
    NumericalPsd(f64),

    #[error("correlation matrix is not positive semidefinite (min eigenvalue {0:.3e})")]
    Correlation(f64),

    #[error("VaR covariance matrix is singular (condition number {0:.3e})")]
    SingularXi(f64),

    #[error("target return {target} is not attainable without short selling (range [{lo}, {hi}])")]
    TargetInfeasible { target: f64, lo: f64, hi: f64 },

    #[error("QP did not converge after {0} iterations")]
    QpFailure(usize),

    #[error("matrix is not positive semidefinite, Cholesky failed")]
    Cholesky,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("window ending {date}: {source}")]
    Window {
        date: NaiveDate,
        #[source]
        source: Box<Error>,
    },

    #[error("replication {index}: {source}")]
    Replication {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
