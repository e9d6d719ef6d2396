use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used for process exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorKind {
    Config,
    Dimension,
    Numeric,
    Domain,
    Protocol,
    OutOfMemory,
    Schedule,
    Fabric,
    Consistency,
    Layout,
    Simulation,
    Io,
}

impl ErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Dimension => "dimension",
            ErrorKind::Numeric => "numeric",
            ErrorKind::Domain => "domain",
            ErrorKind::Protocol => "protocol",
            ErrorKind::OutOfMemory => "out_of_memory",
            ErrorKind::Schedule => "schedule",
            ErrorKind::Fabric => "fabric",
            ErrorKind::Consistency => "consistency",
            ErrorKind::Layout => "layout",
            ErrorKind::Simulation => "simulation",
            ErrorKind::Io => "io",
        }
    }

    /// 0 success, 2 config, 3 numeric, 4 fabric, 1 everything else.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Numeric | ErrorKind::Domain => 3,
            ErrorKind::Fabric => 4,
            _ => 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("rng state protocol violation: {0}")]
    Protocol(String),

    #[error("device out of memory loading block {block_id}: need {requested} bytes, {available} available")]
    OutOfMemory {
        block_id: usize,
        requested: usize,
        available: usize,
    },

    #[error("scheduling contract violated: {0}")]
    Schedule(String),

    #[error("schedule deadlock: no runnable op, cycle {cycle:?}")]
    Deadlock { cycle: Vec<String> },

    #[error("fabric fault: {0}")]
    Fabric(String),

    #[error("consistency check failed: {0}")]
    Consistency(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Dimension { .. } => ErrorKind::Dimension,
            Error::Numeric(_) => ErrorKind::Numeric,
            Error::Domain(_) => ErrorKind::Domain,
            Error::Protocol(_) => ErrorKind::Protocol,
            Error::OutOfMemory { .. } => ErrorKind::OutOfMemory,
            Error::Schedule(_) | Error::Deadlock { .. } => ErrorKind::Schedule,
            Error::Fabric(_) => ErrorKind::Fabric,
            Error::Consistency(_) => ErrorKind::Consistency,
            Error::Layout(_) => ErrorKind::Layout,
            Error::Simulation(_) => ErrorKind::Simulation,
            Error::Io(_) => ErrorKind::Io,
            // Malformed config files are configuration errors.
            Error::Json(_) => ErrorKind::Config,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind().exit_code()
    }

    pub(crate) fn dim(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// Structured form written to stderr by the CLI.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "error": self.kind().as_str(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
    }
}
