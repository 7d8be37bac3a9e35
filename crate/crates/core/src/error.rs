use thiserror::Error;

/// Errors raised by the measure layer, the virtual algebra and the experiment drivers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("label mismatch: {0}")]
    LabelMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unbound function handle {0}")]
    UnboundFunction(usize),

    #[error("degree {degree} exceeds the enumeration limit {limit}")]
    DegreeTooLarge { degree: usize, limit: usize },

    #[error("product space has {size} points, above the cap {cap}")]
    CapExceeded { size: f64, cap: f64 },

    #[error("t = {t} outside the family domain ({lo}, {hi})")]
    OutsideDomain { t: f64, lo: f64, hi: f64 },

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
