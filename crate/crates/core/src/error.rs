use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BeatError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
}

pub type Result<T, E = BeatError> = core::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::BeatError::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
