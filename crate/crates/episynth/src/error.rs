use thiserror::Error;

/// Errors shared across the toolkit.
///
/// The likelihood code distinguishes structurally invalid inputs (these
/// variants) from parameter values that merely make an observation
/// impossible. The latter return `f64::NEG_INFINITY` so samplers can reject
/// the move instead of aborting the run.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation of node '{node}' produced a non-finite intermediate")]
    Evaluation { node: String },

    #[error("graph cycle involving node '{0}'")]
    Cycle(String),

    #[error("no finite-posterior starting point found after {tries} attempts")]
    InitFailure { tries: usize },

    #[error("degenerate particle ensemble: all weights underflowed; rerun the batch through temper_batch")]
    DegenerateEnsemble,

    #[error("split design error: {0}")]
    SplitDesign(String),

    #[error("step size too large: a compartment went negative at step {step}; reduce delta_t")]
    StepSize { step: usize },

    #[error("parameter regime error: {0}")]
    ParameterRegime(String),

    #[error("undefined p-value: {0}")]
    UndefinedPValue(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
