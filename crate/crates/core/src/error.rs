use thiserror::Error;

use crate::continuation::RunRecord;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("CFL condition violated: beta*T*Nx^2/Nt = {number:.6} (must be < 0.5)")]
    Cfl { number: f64 },

    #[error("non-finite value encountered at time step {step}")]
    NonFinite { step: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("every switching-time rollout failed")]
    AllRolloutsFailed,

    #[error("continuation aborted after exhausting bisections at ramp step {ramp}")]
    ContinuationAborted { ramp: usize, record: Box<RunRecord> },
}

pub type Result<T> = std::result::Result<T, Error>;
