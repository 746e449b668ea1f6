use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("singular geometry: {0}")]
    Singularity(String),

    /// The raw action carries no power, so it cannot be scaled onto the
    /// power budget.
    #[error("degenerate action: {0}")]
    DegenerateAction(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("non-finite {what} at episode {episode}, step {step}")]
    NonFinite {
        what: String,
        episode: usize,
        step: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
