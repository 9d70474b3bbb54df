//! Embedding container format, batching, synthetic data and crop geometry.

pub mod collate;
pub mod crop;
pub mod format;
pub mod synth;

pub use collate::{collate, Batch, CollateOptions, DEFAULT_MAX_SEQ_LEN};
pub use crop::{five_crop_boxes, CropBox};
pub use format::{
    load_dataset, read_dataset, write_dataset, DatasetHeader, DatasetReader, EmbeddingRecord,
    ModalityId, ModalityInfo,
};
pub use synth::{gen_synthetic, InteractionSpec, ModalitySpec, SyntheticData, SyntheticSpec};
