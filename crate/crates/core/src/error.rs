use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate ring: need at least 3 nodes, got {0}")]
    DegenerateRing(usize),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("inadmissible change at t={time}: {reason}")]
    Inadmissible { time: f64, reason: String },

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("invalid attribute table: {0}")]
    InvalidAttributes(String),

    #[error("gain check failed in strict mode: {0}")]
    GainViolation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("step size {dt:e} exceeds the stability budget; need dt <= {required:e}")]
    StepTooLarge { dt: f64, required: f64 },

    #[error("local initialization error: {0}")]
    LocalInit(String),

    #[error("lock failure: {0}")]
    LockFailure(String),

    #[error("internal numerical error: {0}")]
    Numerical(String),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
