use thiserror::Error;

pub type Result<T> = std::result::Result<T, DcocError>;

#[derive(Debug, Error)]
pub enum DcocError {
    #[error("simulation diverged: non-finite state at step {step}")]
    SimulationDiverged { step: usize },

    #[error("initial state is not inside X(0) (worst margin {worst_margin:e})")]
    InvalidInitialState { worst_margin: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: {0}")]
    Layout(String),

    #[error("Euler-angle kinematics singular: |cos(pitch)| = {cos_pitch:e}")]
    GimbalSingularity { cos_pitch: f64 },

    #[error("non-finite value from {what} (index {index})")]
    Evaluation { what: &'static str, index: usize },

    #[error("QP subproblem is unbounded")]
    QpUnbounded,

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
