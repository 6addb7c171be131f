use alloc::string::String;

/// Errors raised anywhere in the engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric domain error in `{op}`: {detail}")]
    NumericDomain { op: &'static str, detail: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("parameter `{name}` out of range: {value} not in [{lo}, {hi}]")]
    ParameterRange {
        name: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("chain validation error: {0}")]
    ChainValidation(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("assignment error: {0}")]
    Assignment(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
