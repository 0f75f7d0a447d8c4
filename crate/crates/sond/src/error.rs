use thiserror::Error;

#[derive(Debug, Error)]
pub enum SondError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("frame {frame}: {active} active speakers exceeds maximum overlap K={k}")]
    OverlapExceeded { frame: usize, active: usize, k: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate embedding at chunk {0}: zero norm")]
    DegenerateEmbedding(usize),

    #[error("too many speakers: {found} clusters for {slots} profile slots")]
    TooManySpeakers { found: usize, slots: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty reference timeline: DER undefined")]
    EmptyReference,

    #[error("simulation failed: {0}")]
    Simulation(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("unknown strategy '{name}' for {kind}; known: {known}")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SondError>;
