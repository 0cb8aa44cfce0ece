use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("environment window [{have_lo}, {have_hi}] does not cover required [{need_lo}, {need_hi}]")]
    Window {
        need_lo: i64,
        need_hi: i64,
        have_lo: i64,
        have_hi: i64,
    },

    #[error("truncation depth {depth} leaves bracket width {width:e} above tolerance {tol:e}; increase the depth")]
    TruncationDepth { depth: usize, width: f64, tol: f64 },

    #[error("tilt parameter {eta} is not admissible: {reason}")]
    InadmissibleTilt { eta: f64, reason: String },

    #[error("no sign change of the tilt equation on [{lo}, {hi}]: {hint}")]
    NoSignChange { lo: f64, hi: f64, hint: String },

    #[error("Monte Carlo noise on the tilt root is {eta_se:e} > {tol:e}; increase env_samples")]
    NoisyTilt { eta_se: f64, tol: f64 },

    #[error("centering m_k is not increasing at k = {k} ({prev} >= {next}); increase p_n replicates")]
    NonMonotoneCentering { k: usize, prev: f64, next: f64 },

    #[error("barrier probability estimate is zero at n = {n}; more replicates required")]
    ZeroProbability { n: usize },

    #[error("{failed} of {total} replicates failed, above the allowed fraction {max_fraction}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        max_fraction: f64,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
