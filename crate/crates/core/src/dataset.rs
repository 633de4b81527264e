//! A dataset: segment metadata plus the entity and relationship stores, with
//! atomic per-segment commits and on-disk persistence.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::backends::Embedder;
use crate::ingest::{prepare_segment, IngestError, IngestStats, PreparedSegment, SceneGraphDocument};
use crate::model::{SegmentId, VideoSegment};
use crate::store::{CodecError, EntityStore, RelationshipStore};

pub const SEGMENTS_FILE: &str = "segments.json";
pub const ENTITIES_FILE: &str = "entities.bin";
pub const RELATIONSHIPS_FILE: &str = "relationships.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    segments: BTreeMap<SegmentId, VideoSegment>,
    entities: EntityStore,
    relationships: RelationshipStore,
}

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {source}")]
    Codec { path: String, source: CodecError },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("inconsistent dataset on disk: {0}")]
    Inconsistent(String),
}

/// Per-document failure from a batch ingest, by position in the batch.
#[derive(Debug, thiserror::Error)]
#[error("document {index}: {error}")]
pub struct BatchError {
    pub index: usize,
    pub error: IngestError,
}

impl Dataset {
    pub fn new(dimension: usize) -> Self {
        Self {
            segments: BTreeMap::new(),
            entities: EntityStore::new(dimension),
            relationships: RelationshipStore::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.entities.dimension()
    }

    pub fn segments(&self) -> impl Iterator<Item = &VideoSegment> {
        self.segments.values()
    }

    pub fn segment(&self, vid: &str) -> Option<&VideoSegment> {
        self.segments.get(vid)
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn total_frames(&self) -> usize {
        self.segments.values().map(|s| s.frame_ids.len()).sum()
    }

    pub fn entities(&self) -> &EntityStore {
        &self.entities
    }

    pub fn relationships(&self) -> &RelationshipStore {
        &self.relationships
    }

    fn check_placement(&self, seg: &VideoSegment) -> Result<(), IngestError> {
        let (Some(lo), Some(hi)) = (seg.first_frame(), seg.last_frame()) else {
            return Ok(());
        };
        for other in self.segments.values() {
            if other.vid == seg.vid || other.source_video != seg.source_video {
                continue;
            }
            let (Some(olo), Some(ohi)) = (other.first_frame(), other.last_frame()) else { continue };
            if lo <= ohi && olo <= hi {
                return Err(IngestError::OverlappingSegment {
                    vid: seg.vid.clone(),
                    other: other.vid.clone(),
                    source_video: seg.source_video.clone(),
                });
            }
        }
        Ok(())
    }

    /// Swaps a prepared segment into both stores. With `replace` unset an
    /// existing vid is an error. Either every store changes or none does.
    pub fn commit(&mut self, prepared: PreparedSegment, replace: bool) -> Result<IngestStats, IngestError> {
        let vid = prepared.segment.vid.clone();
        let exists = self.segments.contains_key(&vid);
        if exists && !replace {
            return Err(IngestError::DuplicateSegment(vid));
        }
        self.check_placement(&prepared.segment)?;
        let (n_entities, n_rows) = (prepared.entities.len(), prepared.rows.len());

        let old_entities = self.entities.replace_segment(&vid, prepared.entities)?;
        let old_rows = match self.relationships.replace_segment(&vid, prepared.rows) {
            Ok(old) => old,
            Err(e) => {
                match old_entities {
                    Some(old) => {
                        self.entities.replace_segment(&vid, old).expect("restoring previous records");
                    }
                    None => {
                        self.entities.remove_segment(&vid);
                    }
                }
                return Err(e.into());
            }
        };
        self.segments.insert(vid, prepared.segment);

        Ok(IngestStats {
            segments_added: usize::from(!exists),
            segments_replaced: usize::from(exists),
            entities_added: n_entities,
            entities_removed: old_entities.map_or(0, |v| v.len()),
            relationships_added: n_rows,
            relationships_removed: old_rows.map_or(0, |v| v.len()),
            embed_text_calls: prepared.embed_text_calls,
            embed_image_calls: prepared.embed_image_calls,
        })
    }

    fn check_dimension(&self, embedder: &dyn Embedder) -> Result<(), IngestError> {
        match embedder.dimension() {
            d if d == self.dimension() => Ok(()),
            got => Err(IngestError::Dimension { expected: self.dimension(), got }),
        }
    }

    /// Adds a new segment. Rejects a vid that is already present.
    pub fn ingest_scene_graph(
        &mut self,
        doc: &SceneGraphDocument,
        embedder: &dyn Embedder,
    ) -> Result<IngestStats, IngestError> {
        self.check_dimension(embedder)?;
        if self.segments.contains_key(doc.vid()) {
            return Err(IngestError::DuplicateSegment(doc.vid().to_owned()));
        }
        let prepared = prepare_segment(doc, embedder)?;
        self.commit(prepared, false)
    }

    /// Adds or replaces one segment; other segments are left untouched.
    pub fn upsert_segment(&mut self, doc: &SceneGraphDocument, embedder: &dyn Embedder) -> Result<IngestStats, IngestError> {
        self.check_dimension(embedder)?;
        self.check_placement(&doc.segment)?;
        let prepared = prepare_segment(doc, embedder)?;
        self.commit(prepared, true)
    }

    /// Ingests new segments, preparing them in parallel on the current rayon
    /// pool. All-or-nothing: any failure leaves the dataset unchanged and
    /// every failing document is reported.
    pub fn ingest_batch(
        &mut self,
        docs: &[SceneGraphDocument],
        embedder: &dyn Embedder,
    ) -> Result<IngestStats, Vec<BatchError>> {
        if let Err(error) = self.check_dimension(embedder) {
            return Err(vec![BatchError { index: 0, error }]);
        }
        let mut errors = Vec::new();
        let mut seen = HashSet::new();
        for (index, d) in docs.iter().enumerate() {
            if self.segments.contains_key(d.vid()) || !seen.insert(d.vid()) {
                errors.push(BatchError { index, error: IngestError::DuplicateSegment(d.vid().to_owned()) });
            }
        }
        let prepared: Vec<Result<PreparedSegment, IngestError>> =
            docs.par_iter().map(|d| prepare_segment(d, embedder)).collect();

        let mut ready = Vec::with_capacity(docs.len());
        for (index, p) in prepared.into_iter().enumerate() {
            match p {
                Ok(p) => ready.push(p),
                Err(error) => errors.push(BatchError { index, error }),
            }
        }
        if !errors.is_empty() {
            errors.sort_by_key(|e| e.index);
            return Err(errors);
        }

        let mut next = self.clone();
        let mut stats = IngestStats::default();
        for (index, p) in ready.into_iter().enumerate() {
            match next.commit(p, false) {
                Ok(s) => stats.merge(&s),
                Err(error) => errors.push(BatchError { index, error }),
            }
        }
        if !errors.is_empty() {
            return Err(errors);
        }
        *self = next;
        Ok(stats)
    }

    /// Full-scan referential integrity check over both stores.
    pub fn check_integrity(&self) -> Result<(), String> {
        if self.entities.segment_count() > self.segments.len() {
            return Err("entity store holds segments without metadata".into());
        }
        for rec in self.entities.iter() {
            let seg = self.segments.get(&rec.vid).ok_or_else(|| format!("entity {}/{} has no segment", rec.vid, rec.eid))?;
            if let Some(f) = rec.frame_ids.iter().find(|f| !seg.contains_frame(**f)) {
                return Err(format!("entity {}/{} appears in frame {f} outside its segment", rec.vid, rec.eid));
            }
        }
        for row in self.relationships.iter() {
            let seg = self.segments.get(&row.vid).ok_or_else(|| format!("row in unknown segment {}", row.vid))?;
            if !seg.contains_frame(row.fid) {
                return Err(format!("row {row:?} outside its segment"));
            }
            if row.sid == row.oid {
                return Err(format!("row {row:?} relates an entity to itself"));
            }
            for eid in [row.sid, row.oid] {
                let rec = self.entities.get(&row.vid, eid).ok_or_else(|| format!("row {row:?} references missing entity {eid}"))?;
                if rec.frame_ids.binary_search(&row.fid).is_err() {
                    return Err(format!("row {row:?}: entity {eid} absent from frame"));
                }
            }
        }
        Ok(())
    }

    /// Writes the three dataset files into `dir`, each through a temporary
    /// file and a rename.
    pub fn save(&self, dir: &Path) -> Result<(), PersistError> {
        fs::create_dir_all(dir).map_err(|source| PersistError::Io { path: dir.display().to_string(), source })?;
        let segments: Vec<&VideoSegment> = self.segments.values().collect();
        let json = serde_json::to_vec_pretty(&segments).expect("segments serialize");
        write_atomic(&dir.join(SEGMENTS_FILE), &json)?;
        write_atomic(&dir.join(ENTITIES_FILE), &self.entities.to_bytes())?;
        write_atomic(&dir.join(RELATIONSHIPS_FILE), &self.relationships.to_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PersistError> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read(&path).map_err(|source| PersistError::Io { path: path.display().to_string(), source })
        };
        let path_of = |name: &str| dir.join(name).display().to_string();

        let segments: Vec<VideoSegment> = serde_json::from_slice(&read(SEGMENTS_FILE)?)
            .map_err(|source| PersistError::Json { path: path_of(SEGMENTS_FILE), source })?;
        let entities = EntityStore::from_bytes(&read(ENTITIES_FILE)?)
            .map_err(|source| PersistError::Codec { path: path_of(ENTITIES_FILE), source })?;
        let relationships = RelationshipStore::from_bytes(&read(RELATIONSHIPS_FILE)?)
            .map_err(|source| PersistError::Codec { path: path_of(RELATIONSHIPS_FILE), source })?;

        let mut map = BTreeMap::new();
        for s in segments {
            let vid = s.vid.clone();
            if map.insert(vid.clone(), s).is_some() {
                return Err(PersistError::Inconsistent(format!("segment {vid:?} listed twice")));
            }
        }
        let dataset = Self { segments: map, entities, relationships };
        dataset.check_integrity().map_err(PersistError::Inconsistent)?;
        Ok(dataset)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    let io_err = |source| PersistError::Io { path: path.display().to_string(), source };
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err)?;
    f.write_all(bytes).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}
