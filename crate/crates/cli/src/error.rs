use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing inputs: {}", .0.join("; "))]
    MissingInputs(Vec<String>),
    #[error("run directory {} is locked by another process (remove the lock file if that process is gone)", .0.display())]
    Locked(PathBuf),
    #[error(transparent)]
    Core(#[from] latefuse_core::Error),
    #[error(transparent)]
    Tensor(#[from] latefuse_tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn category(&self) -> &'static str {
        use latefuse_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => "config",
            CliError::MissingInputs(_) | CliError::Core(E::Missing(_)) => "missing-input",
            CliError::Locked(_) => "locked",
            CliError::Core(E::Data { .. } | E::InvalidClass { .. } | E::Shape(_) | E::Dates(_) | E::NoCloudless(_) | E::Empty(_)) => "data",
            CliError::Core(E::NonFinite { .. }) => "training",
            CliError::Io(_) | CliError::Core(E::Io(_)) => "io",
            _ => "internal",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "missing-input" => 3,
            "locked" => 4,
            "data" => 5,
            "training" => 6,
            "io" => 7,
            _ => 1,
        }
    }
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<toml::ser::Error> for CliError {
    fn from(e: toml::ser::Error) -> Self {
        CliError::Config(e.to_string())
    }
}
