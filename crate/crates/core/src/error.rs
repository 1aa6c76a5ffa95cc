use thiserror::Error;

/// Errors produced anywhere in the mixing pipeline.
#[derive(Debug, Error)]
pub enum GlueError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("corruption error: {0}")]
    Corruption(String),
    #[error("version error: unsupported checkpoint format_version {0}")]
    Version(u32),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("[{phase}] {source}")]
    Phase {
        phase: String,
        #[source]
        source: Box<GlueError>,
    },
}

pub type Result<T> = std::result::Result<T, GlueError>;

/// Broad error class, shared by the CLI exit codes and the C status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl GlueError {
    pub fn class(&self) -> ErrorClass {
        match self {
            GlueError::Config(_) => ErrorClass::Config,
            GlueError::Numeric(_) => ErrorClass::Numeric,
            GlueError::Json(_) => ErrorClass::Config,
            GlueError::Phase { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        }
    }

    pub fn in_phase(self, phase: &str) -> GlueError {
        match self {
            already @ GlueError::Phase { .. } => already,
            other => GlueError::Phase {
                phase: phase.to_string(),
                source: Box::new(other),
            },
        }
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(GlueError::Numeric(format!("{what}[{i}] is not finite"))),
        None => Ok(()),
    }
}
