use thiserror::Error;

/// Errors raised across the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("wav error on {path}: {message}")]
    Wav { path: String, message: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "InvalidInput",
            Error::Shape(_) => "ShapeError",
            Error::Numerical(_) => "NumericalError",
            Error::Graph(_) => "GraphError",
            Error::Config { .. } => "ConfigError",
            Error::Diverged { .. } => "Diverged",
            Error::Io { .. } => "IoError",
            Error::Wav { .. } => "WavError",
            Error::Json(_) => "JsonError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Deserializes JSON, reporting schema violations with the offending field
/// path (e.g. `spec_augment.max_width`).
pub fn from_json<T: serde::de::DeserializeOwned>(text: &str, source: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config {
            path: if path == "." {
                source.to_string()
            } else {
                format!("{source}:{path}")
            },
            message: e.into_inner().to_string(),
        }
    })
}
