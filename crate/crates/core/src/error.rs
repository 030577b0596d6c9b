//! Error types shared across the simulator.

use thiserror::Error;

/// Errors produced by simulation, solving, learning and reporting code.
#[derive(Debug, Error)]
pub enum SimError {
    /// A driving EV can reach no station and cannot reach the highway exit
    /// on its remaining charge. Signals a mis-configured scenario.
    #[error("EV {ev} stranded at minute {minute}: no reachable station and insufficient charge to exit")]
    StrandedEv { ev: u32, minute: u64 },

    /// An EV has no station in its strategy set at selection time.
    #[error("EV {ev} has no reachable station to select")]
    NoReachableStation { ev: u32 },

    /// An argument fell outside its documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// The station-selection game exceeded its theoretical revision bound,
    /// which indicates a violated monotonicity assumption (a bug).
    #[error("station selection failed to converge within {bound} revisions ({evs} EVs)")]
    NonConvergence { bound: u64, evs: usize },

    /// A loss or parameter became non-finite during training.
    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),

    /// Tensor/batch dimensions disagreed.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Scenario or policy-file contents failed validation.
    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, SimError>;
