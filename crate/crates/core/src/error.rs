use thiserror::Error;

/// Error taxonomy shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/field extents do not line up.
    #[error("shape error: {0}")]
    Shape(String),
    /// An argument violates its contract (bad flag combination, odd L, ...).
    #[error("argument error: {0}")]
    Argument(String),
    /// An index or rectangle falls outside the addressable range.
    #[error("range error: {0}")]
    Range(String),
    /// Input data is semantically invalid (non-finite values, bad labels, ...).
    #[error("data error: {0}")]
    Data(String),
    /// A serialized container is malformed or truncated.
    #[error("format error: {0}")]
    Format(String),
    /// Internal state does not match the requested operation.
    #[error("state error: {0}")]
    State(String),
    /// A batch sample carries a dataset tag no head is registered for.
    #[error("routing error: {0}")]
    Routing(String),
    /// The learning-rate schedule has no value at or past its stop point.
    #[error("schedule exhausted at iteration {0}")]
    ScheduleExhausted(u64),
    /// Keyed collections (score sets) disagree on their key sets.
    #[error("key error: {0}")]
    Key(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
