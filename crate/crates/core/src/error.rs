use thiserror::Error;

/// Errors raised by the numerical routines of this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("order mismatch: {left} vs {right}")]
    OrderMismatch { left: usize, right: usize },

    #[error("contraction depth {r} exceeds min order {max}")]
    ContractionDepth { r: usize, max: usize },

    #[error("derivative order {k} exceeds chaos order {n}")]
    DerivativeOrder { k: usize, n: usize },

    #[error("time {t} is not a grid node")]
    OffGrid { t: f64 },

    #[error("basis is not orthonormal (max Gram deviation {deviation:.3e})")]
    NotOrthonormal { deviation: f64 },

    #[error("paths do not join: endpoint mismatch {gap:.3e}")]
    EndpointMismatch { gap: f64 },

    #[error("non-finite state on interval [{t0}, {t1}]")]
    NonFinite { t0: f64, t1: f64 },

    #[error("driver is missing derivative layer of order {order}")]
    MissingLayer { order: usize },

    #[error("{what} too large: {size} exceeds limit {limit}")]
    TooLarge { what: &'static str, size: usize, limit: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
