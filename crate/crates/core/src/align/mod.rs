//! Cross-tokenizer alignment: minimum-edit-distance vocabulary mapping,
//! dynamic-programming sequence matching and sparse logit projection.

mod distance;
mod path;
mod project;
mod sparse;
mod table;

use thiserror::Error;

pub use distance::edit_distance;
pub use path::{align_sequences, AlignedPair, AlignmentPath, PairKind, MAX_SPAN};
pub use project::{project_logits, ONE_HOT_MARGIN};
pub use sparse::{PositionLogits, SparseLogits};
pub use table::{build_mapping_table, MappingCache, VocabMappingTable};

use crate::textfmt::FormatError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("{0:?} token sequence is empty")]
    EmptySequence(Side),
    #[error("{side:?} token id {id} is not in its vocabulary")]
    InvalidId { side: Side, id: u32 },
    #[error("mapping table does not match the source vocabulary")]
    TableMismatch,
    #[error("carrier token {carrier} has no logits (source has {positions} positions)")]
    CarrierOutOfRange { carrier: usize, positions: usize },
    #[error("path covers {path} target tokens but {positions} positions were requested")]
    LengthMismatch { path: usize, positions: usize },
    #[error("invalid alignment path: {0}")]
    InvalidPath(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}
