use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    MathDomain(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("ledger error: {0}")]
    Ledger(String),

    #[error("bank error: {0}")]
    Bank(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short category label used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) | Error::MathDomain(_) | Error::NonFinite(_) => "numeric",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Ledger(_) => "ledger",
            Error::Bank(_) => "bank",
            Error::Data(_) => "data",
            Error::Format(_)
            | Error::Truncated(_)
            | Error::VersionMismatch { .. }
            | Error::Checksum(_) => "load",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
