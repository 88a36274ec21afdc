use alloc::string::String;

pub type Result<T, E = LensError> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LensError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("transfer error: mismatched fields {0}")]
    Transfer(String),
    #[error("vocabulary error: unknown token `{0}`")]
    Vocabulary(String),
    #[error("invalid head address: {0}")]
    HeadAddress(String),
}
