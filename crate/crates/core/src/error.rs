use thiserror::Error;

/// Errors raised by the spin, distortion, GRAPE and optimizer layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or channel layouts that do not fit together.
    #[error("structural error: {0}")]
    Structural(String),

    /// Non-finite values or numerically unusable input.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A recursive filter whose pole lies on or outside the unit circle.
    #[error("unstable filter: |p| = {0} >= 1")]
    Unstable(f64),

    /// A single-zero filter with z = 1, which has no finite DC normalization.
    #[error("single-zero filter with z = 1 has no unit DC gain normalization")]
    DivisionByZero,

    /// A parameter outside the domain of the model it parameterizes.
    #[error("domain error: {0}")]
    Domain(String),

    /// Failure while evaluating one member of an ensemble.
    #[error("ensemble member {member}: {source}")]
    Member {
        member: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
