use std::path::PathBuf;

/// Errors produced anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token {token} out of range for modulus {p}")]
    TokenOutOfRange { token: usize, p: usize },

    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("model width {d_model} is not divisible by {n_heads} heads")]
    HeadsDoNotDivide { d_model: usize, n_heads: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("missing artifact {path}: {reason}")]
    MissingArtifact { path: PathBuf, reason: String },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
