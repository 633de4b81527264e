//! Dataset catalog and HTTP service.
//!
//! The [`Catalog`] owns persisted datasets and the query job table; the
//! [`api`] module exposes it over HTTP. The CLI drives the same catalog
//! directly.

pub mod api;
pub mod archive;
pub mod catalog;
pub mod config;

pub use archive::{Archive, ArchiveUpload, Diagnostic};
pub use catalog::{Catalog, DatasetDescriptor, IngestOutcome, QueryRecord, QueryState, QueryStatus, ServiceError};
pub use config::{BackendKind, ServiceConfig};
