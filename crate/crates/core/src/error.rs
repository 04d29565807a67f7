use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: validation error: {message}")]
    Validation { line: usize, message: String },

    #[error("duplicate request id {0}")]
    DuplicateId(u64),

    #[error("underdetermined fit: {0}")]
    Underdetermined(String),

    #[error("non-finite value at channel {channel}, index {index}")]
    NonFinite { channel: usize, index: usize },

    #[error("corpus too small: {got} samples, need at least {need}")]
    CorpusTooSmall { got: usize, need: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("incompatible reports: {0}")]
    Incompatible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("livelock: no completion for {window_ms:.0} ms of simulated time; blocked jobs {blocked:?}")]
    Livelock { window_ms: f64, blocked: Vec<u64> },

    #[error("deadlock: no runnable work and no pending events; blocked jobs {blocked:?}")]
    Deadlock { blocked: Vec<u64> },

    #[error("invariant violated at t={time_us}us: {message}")]
    Invariant { time_us: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for aborts raised by the simulation watchdog.
    pub fn is_runtime_abort(&self) -> bool {
        matches!(self, Error::Livelock { .. } | Error::Deadlock { .. })
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
