use thiserror::Error;

/// Errors surfaced while validating data, evaluating likelihood components,
/// or running the estimators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset contains no records")]
    EmptyData,
    #[error("record {record}: expected {expected} {kind} values, found {found}")]
    DimensionMismatch {
        record: usize,
        kind: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("record {record}: `{field}` = {value} is not finite or outside its domain")]
    NonFiniteValue {
        record: usize,
        field: &'static str,
        value: f64,
    },
    #[error("tied uncensored event times at t = {time} (records {first} and {second})")]
    TiedEventTimes {
        time: f64,
        first: usize,
        second: usize,
    },
    #[error("identification violated: {condition}")]
    IdentificationViolation { condition: String },
    #[error("invalid distribution parameter: {0}")]
    InvalidParameter(String),
    #[error("baseline hazard has no jump at event time {time}")]
    BaselineNotCovering { time: f64 },
    #[error("all importance weights underflowed{}", match .subject { Some(i) => format!(" for subject {i}"), None => String::new() })]
    DegenerateWeights { subject: Option<usize> },
    #[error("Hessian is singular even after ridge fallback")]
    SingularHessian,
    #[error("Cox coefficient magnitude exceeded {limit} (monotone likelihood)")]
    MonotoneLikelihoodDivergence { limit: f64 },
    #[error("probit coefficient magnitude exceeded {limit} (separation)")]
    Separation { limit: f64 },
    #[error("inner optimizer failed to converge within {max_iter} iterations")]
    NonConvergence { max_iter: usize },
    #[error("{failed} of {total} bootstrap resamples failed (more than {limit_percent}% allowed)")]
    TooManyFailures {
        failed: usize,
        total: usize,
        limit_percent: u32,
    },
    #[error("no estimates to summarize")]
    EmptyEstimates,
    #[error("invalid scenario id {0} (valid ids are 1..=7)")]
    InvalidScenario(u32),
    #[error("invalid scenario spec: {0}")]
    InvalidSpec(String),
    #[error("input schema: {0}")]
    InputSchema(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
