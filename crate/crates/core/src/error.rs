use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MaaError>;

#[derive(Debug, Error)]
pub enum MaaError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate row {row} in layer_norm: variance + eps is zero")]
    DegenerateRow { row: usize },

    #[error("masked_mean_pool: mask selects no rows")]
    EmptyMask,

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("gradient probe produced a non-finite loss while perturbing `{param}`")]
    Probe { param: String },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sample {sample} has {len} tokens, max sequence length is {max}")]
    Length { sample: usize, len: usize, max: usize },

    #[error("crop geometry error: image {height}x{width} is smaller than 2x2")]
    Geometry { height: usize, width: usize },

    #[error("unknown modality id {0}")]
    UnknownModality(u8),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("{0}")]
    Other(String),
}

impl MaaError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        MaaError::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Usage and validation failures map to exit code 2, everything else to 1.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            MaaError::Validation(_)
                | MaaError::Config(_)
                | MaaError::Label { .. }
                | MaaError::UnknownModality(_)
                | MaaError::Geometry { .. }
        )
    }
}
