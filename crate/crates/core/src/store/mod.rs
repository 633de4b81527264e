//! The two stores built from scene-graph views.

mod codec;
pub mod entity;
pub mod relationship;

pub use codec::CodecError;
pub use entity::{cosine_similarity, EntityMatch, EntityStore, SimilarityError};
pub use relationship::{join_triple, CandidatePair, FilterPredicate, RelationshipStore, Role};

use crate::model::SegmentId;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StoreError {
    #[error("segment {0:?} already present")]
    DuplicateSegment(SegmentId),
    #[error("segment {vid:?}: duplicate entity {eid}")]
    DuplicateEntity { vid: SegmentId, eid: u32 },
    #[error("segment {vid:?} entity {eid}: {reason}")]
    BadEmbedding { vid: SegmentId, eid: u32, reason: String },
    #[error("record belongs to segment {found:?}, expected {expected:?}")]
    ForeignRecord { expected: SegmentId, found: SegmentId },
    #[error("segment {vid:?}: duplicate relationship row {row}")]
    DuplicateRow { vid: SegmentId, row: String },
}
