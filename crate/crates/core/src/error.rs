use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, got {got:?}, expected {expected:?}")]
    ShapeMismatch {
        op: &'static str,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("label value {value} is not below the class count {classes}")]
    LabelOutOfRange { value: u8, classes: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid augmentation `{0}`")]
    Augmentation(String),
}

pub type Result<T> = core::result::Result<T, Error>;
