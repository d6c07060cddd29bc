use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("invalid quadrature: {0}")]
    Quadrature(String),

    #[error("invalid phantom: {0}")]
    Phantom(String),

    #[error("invalid scattering kernel: {0}")]
    Kernel(String),

    #[error("CFL violation: {0}")]
    Cfl(String),

    #[error("invalid source: {0}")]
    Source(String),

    #[error("shape mismatch: {0}")]
    Mismatch(String),

    #[error("no receivers: {0}")]
    NoReceivers(String),

    #[error("level set: {0}")]
    LevelSet(String),

    #[error("sensitivity: {0}")]
    Sensitivity(String),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

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

    /// True for errors caused by user input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Json(_)
                | Error::Grid(_)
                | Error::Quadrature(_)
                | Error::Phantom(_)
                | Error::Kernel(_)
                | Error::Source(_)
                | Error::Cfl(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
