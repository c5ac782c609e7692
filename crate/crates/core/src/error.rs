use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-binary exposure at (unit {unit}, time {time}): {value}")]
    NonBinaryExposure {
        unit: usize,
        time: usize,
        value: f64,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("missing or non-finite value in {field} at unit {unit}")]
    MissingValue { field: &'static str, unit: usize },

    #[error("non-positive offset at unit {unit}")]
    NonPositiveOffset { unit: usize },

    #[error("negative count outcome at unit {unit}")]
    NegativeCount { unit: usize },

    #[error("no MLE: {0}")]
    NoMle(String),

    #[error("quasi-separation: coefficient norm {norm:.3e} exceeded bound")]
    QuasiSeparation { norm: f64 },

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("{what} did not converge within {iterations} iterations")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
    },

    #[error("link {link} does not match outcome kind {kind}")]
    LinkMismatch {
        link: &'static str,
        kind: &'static str,
    },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("no contrast: every positively weighted unit has cumulative exposure {0}")]
    NoContrast(u32),

    #[error("infeasible subset: {0}")]
    InfeasibleSubset(String),

    #[error("time point {time}: {source}")]
    AtTime {
        time: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("need at least 2 feasible iterations, got {0}")]
    TooFewFeasible(usize),

    #[error("bootstrap unstable: {failed} of {total} resamples failed")]
    BootstrapUnstable { failed: usize, total: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_time(time: usize) -> impl FnOnce(Error) -> Error {
        move |source| Error::AtTime {
            time,
            source: Box::new(source),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
