use thiserror::Error;

/// Errors raised by the sampler library.
#[derive(Debug, Error)]
pub enum NaasError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("simulation diverged in {stage} stage at step {step}")]
    Simulation { stage: &'static str, step: usize },

    #[error("lean adjoint became non-finite at step {step}")]
    Adjoint { step: usize },

    #[error("non-finite training loss (batch size {batch}, max |target| {max_target}, max |output| {max_output})")]
    Training {
        batch: usize,
        max_target: f64,
        max_output: f64,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<NaasError>,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NaasError {
    pub fn context(self, context: impl Into<String>) -> Self {
        NaasError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = NaasError> = std::result::Result<T, E>;
