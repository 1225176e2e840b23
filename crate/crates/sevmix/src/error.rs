use thiserror::Error;

/// Library-wide error type.
///
/// Degenerate-truncation variants carry the offending probability mass so
/// callers can report how far a configuration is from being usable.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A truncated distribution was conditioned on an event of mass < 1e-12.
    #[error("truncation mass {mass:.3e} below 1e-12 in {context}")]
    DegenerateTruncation { mass: f64, context: &'static str },

    /// Body component `index` puts essentially no mass below the threshold,
    /// so it cannot explain any sub-threshold observation.
    #[error("body component {index} has truncated mass {mass:.3e} below 1e-12")]
    DegenerateComponent { index: usize, mass: f64 },

    #[error("M-step failure in {block}: {detail}")]
    MStep { block: &'static str, detail: String },

    #[error("fit failed: {0}")]
    Fit(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
