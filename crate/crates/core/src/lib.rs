//! Neuro-symbolic video moment retrieval over scene-graph views.
//!
//! Segments are ingested as scene-graph documents into an entity store
//! (text and image embeddings per tracked entity) and a relationship store
//! (per-frame subject-predicate-object rows). Multi-frame event queries are
//! answered by vector search, relational filtering and joins, verifier-based
//! refinement, and temporal constraint matching; see [`engine`].

pub mod backends;
pub mod dataset;
pub mod engine;
pub mod ingest;
pub mod model;
pub mod store;
pub mod synth;

pub use dataset::Dataset;
pub use engine::{execute_query, EngineConfig, EngineError, ExecutionReport, QueryEngine, QueryOutcome};
pub use model::{parse_query, validate_query, HyperParams, MatchResult, QuerySpec};
