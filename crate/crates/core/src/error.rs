use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// The mixture marginal vanishes at an outcome that carries data.
    #[error("mixture marginal is zero at outcome {0}")]
    ZeroMarginal(usize),

    #[error(
        "marginal cell {cell} rounds to zero at {mass_units} mass units; increase mass_units"
    )]
    InfeasibleRounding { cell: usize, mass_units: u64 },

    #[error("grids are not nested: {0}")]
    NotNested(String),

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
