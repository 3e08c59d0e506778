use thiserror::Error;

pub type Result<T, E = HydaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HydaError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("structure error: {0}")]
    Structure(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HydaError {
    pub fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Self::Format(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the command-line surface:
    /// 2 config, 3 data/format, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Shape(_) | Self::Format(_) | Self::Label(_) | Self::Io { .. } => 3,
            Self::Numeric(_) | Self::Structure(_) | Self::Metric(_) => 4,
        }
    }
}

pub(crate) fn shape_mismatch(what: &str, a: &[usize], b: &[usize]) -> HydaError {
    HydaError::Shape(format!("{what}: {a:?} vs {b:?}"))
}
