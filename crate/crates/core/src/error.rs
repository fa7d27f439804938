use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no route from zone {origin} to zone {destination}")]
    NoRoute { origin: String, destination: String },

    #[error("invalid action {action}: action space has {count} actions")]
    InvalidAction { action: i64, count: usize },

    #[error("episode finished; call reset before stepping again")]
    EpisodeFinished,

    #[error("environment has not been reset")]
    NotReset,

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing run manifests: {}", .0.join(", "))]
    MissingManifests(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
