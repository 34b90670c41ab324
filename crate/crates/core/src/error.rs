use thiserror::Error;

pub type Result<T> = std::result::Result<T, DfrcError>;

#[derive(Debug, Error)]
pub enum DfrcError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid placement: {0}")]
    InvalidPlacement(String),

    #[error("invalid channel model: {0}")]
    InvalidChannel(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("cannot fit pattern: {0}")]
    Geometry(String),

    #[error("solver failure at AO iteration {ao_iter}, ADMM iteration {admm_iter}: {reason}")]
    Solver {
        ao_iter: usize,
        admm_iter: usize,
        reason: String,
    },

    #[error("unknown {kind} '{name}' (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("experiment stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<DfrcError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DfrcError {
    pub fn in_stage(self, stage: &str) -> Self {
        DfrcError::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
