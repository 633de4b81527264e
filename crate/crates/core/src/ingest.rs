//! Scene-graph documents, segmentation, and embedding of structured views.
//!
//! Ingestion is split in two: [`prepare_segment`] validates a document and
//! computes every embedding without touching any store, then
//! [`Dataset::commit`](crate::dataset::Dataset::commit) swaps the prepared
//! records in. A failure in either step leaves the stores unchanged.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, Embedder};
use crate::model::{EntityId, EntityRecord, FrameId, Fps, RelationshipRow, SegmentId, VideoSegment};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub eid: EntityId,
    pub label: String,
    pub frame_ids: Vec<FrameId>,
    /// Per-frame crop image locators.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub crops: BTreeMap<FrameId, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservedTriple {
    pub fid: FrameId,
    pub sid: EntityId,
    pub rl: String,
    pub oid: EntityId,
}

/// Structured view of one segment: tracked detections and per-frame SPO
/// triples. One JSON file per segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGraphDocument {
    pub segment: VideoSegment,
    pub detections: Vec<Detection>,
    pub triples: Vec<ObservedTriple>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DocumentError {
    #[error("segment has no frames")]
    NoFrames,
    #[error("segment frame ids are not strictly increasing and contiguous")]
    NonContiguousFrames,
    #[error("segment id is empty")]
    EmptyVid,
    #[error("frame image for frame {0} outside the segment")]
    ImageOutsideSegment(FrameId),
    #[error("duplicate detection eid {0}")]
    DuplicateEntity(EntityId),
    #[error("detection {0} has an empty label")]
    EmptyLabel(EntityId),
    #[error("detection {0} has no frames")]
    EmptyTrack(EntityId),
    #[error("detection {eid}: frame ids not strictly increasing")]
    UnsortedTrack { eid: EntityId },
    #[error("detection {eid}: frame {fid} outside the segment")]
    TrackOutsideSegment { eid: EntityId, fid: FrameId },
    #[error("detection {eid}: crop for frame {fid} where the entity is not present")]
    CropOutsideTrack { eid: EntityId, fid: FrameId },
    #[error("triple {index}: unknown entity {eid}")]
    UnknownEntity { index: usize, eid: EntityId },
    #[error("triple {index}: frame {fid} outside the segment")]
    TripleOutsideSegment { index: usize, fid: FrameId },
    #[error("triple {index}: entity {eid} not present in frame {fid}")]
    EntityAbsent { index: usize, eid: EntityId, fid: FrameId },
    #[error("triple {index}: subject equals object ({eid})")]
    SelfRelation { index: usize, eid: EntityId },
    #[error("triple {index}: empty relationship label")]
    EmptyRelation { index: usize },
    #[error("triple {index}: duplicates an earlier triple")]
    DuplicateTriple { index: usize },
}

impl SceneGraphDocument {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("document serializes")
    }

    pub fn vid(&self) -> &str {
        &self.segment.vid
    }

    pub fn validate(&self) -> Result<(), DocumentError> {
        let seg = &self.segment;
        if seg.vid.is_empty() {
            return Err(DocumentError::EmptyVid);
        }
        if seg.frame_ids.is_empty() {
            return Err(DocumentError::NoFrames);
        }
        if !seg.frames_are_contiguous() {
            return Err(DocumentError::NonContiguousFrames);
        }
        if let Some(fid) = seg.frame_images.keys().find(|f| !seg.contains_frame(**f)) {
            return Err(DocumentError::ImageOutsideSegment(*fid));
        }

        let mut tracks: HashMap<EntityId, &Detection> = HashMap::new();
        for d in &self.detections {
            if tracks.insert(d.eid, d).is_some() {
                return Err(DocumentError::DuplicateEntity(d.eid));
            }
            if d.label.trim().is_empty() {
                return Err(DocumentError::EmptyLabel(d.eid));
            }
            if d.frame_ids.is_empty() {
                return Err(DocumentError::EmptyTrack(d.eid));
            }
            if d.frame_ids.windows(2).any(|w| w[0] >= w[1]) {
                return Err(DocumentError::UnsortedTrack { eid: d.eid });
            }
            if let Some(fid) = d.frame_ids.iter().find(|f| !seg.contains_frame(**f)) {
                return Err(DocumentError::TrackOutsideSegment { eid: d.eid, fid: *fid });
            }
            if let Some(fid) = d.crops.keys().find(|f| d.frame_ids.binary_search(f).is_err()) {
                return Err(DocumentError::CropOutsideTrack { eid: d.eid, fid: *fid });
            }
        }

        let mut seen = BTreeSet::new();
        for (index, t) in self.triples.iter().enumerate() {
            if !seg.contains_frame(t.fid) {
                return Err(DocumentError::TripleOutsideSegment { index, fid: t.fid });
            }
            if t.sid == t.oid {
                return Err(DocumentError::SelfRelation { index, eid: t.sid });
            }
            if t.rl.trim().is_empty() {
                return Err(DocumentError::EmptyRelation { index });
            }
            for eid in [t.sid, t.oid] {
                let track = tracks.get(&eid).ok_or(DocumentError::UnknownEntity { index, eid })?;
                if track.frame_ids.binary_search(&t.fid).is_err() {
                    return Err(DocumentError::EntityAbsent { index, eid, fid: t.fid });
                }
            }
            if !seen.insert((t.fid, t.sid, &t.rl, t.oid)) {
                return Err(DocumentError::DuplicateTriple { index });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub segments_added: usize,
    pub segments_replaced: usize,
    pub entities_added: usize,
    pub entities_removed: usize,
    pub relationships_added: usize,
    pub relationships_removed: usize,
    pub embed_text_calls: usize,
    pub embed_image_calls: usize,
}

impl IngestStats {
    pub fn merge(&mut self, other: &IngestStats) {
        self.segments_added += other.segments_added;
        self.segments_replaced += other.segments_replaced;
        self.entities_added += other.entities_added;
        self.entities_removed += other.entities_removed;
        self.relationships_added += other.relationships_added;
        self.relationships_removed += other.relationships_removed;
        self.embed_text_calls += other.embed_text_calls;
        self.embed_image_calls += other.embed_image_calls;
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("segment {vid:?}: invalid scene-graph document: {source}")]
    Document { vid: SegmentId, source: DocumentError },
    #[error("segment {0:?} already ingested; use upsert")]
    DuplicateSegment(SegmentId),
    #[error("segment {vid:?} overlaps segment {other:?} of source video {source_video:?}")]
    OverlappingSegment { vid: SegmentId, other: SegmentId, source_video: String },
    #[error("segment {vid:?}: embedding backend failed: {source}")]
    Backend { vid: SegmentId, source: BackendError },
    #[error("embedding dimension {got} does not match dataset dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
}

impl IngestError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, IngestError::Backend { source, .. } if source.is_retriable())
    }
}

/// A validated segment with all embeddings computed, ready to commit.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSegment {
    pub segment: VideoSegment,
    pub entities: Vec<EntityRecord>,
    pub rows: Vec<RelationshipRow>,
    pub embed_text_calls: usize,
    pub embed_image_calls: usize,
}

/// Locator embedded for a detection without any crop.
pub fn placeholder_locator(label: &str) -> String {
    format!("placeholder://label/{label}")
}

/// Validates `doc` and embeds every detection: `ete` from its label, `eie`
/// from the crop at the first tracked frame that has one, or from a
/// label-derived placeholder when the detection carries no crop.
pub fn prepare_segment(doc: &SceneGraphDocument, embedder: &dyn Embedder) -> Result<PreparedSegment, IngestError> {
    let vid = doc.segment.vid.clone();
    doc.validate().map_err(|source| IngestError::Document { vid: vid.clone(), source })?;
    let backend = |source| IngestError::Backend { vid: vid.clone(), source };

    let labels: Vec<String> = doc.detections.iter().map(|d| d.label.clone()).collect();
    let text_vectors = embedder.embed_text_batch(&labels).map_err(backend)?;
    if text_vectors.len() != labels.len() {
        return Err(backend(BackendError::Parse(format!(
            "expected {} embeddings, got {}",
            labels.len(),
            text_vectors.len()
        ))));
    }

    let mut entities = Vec::with_capacity(doc.detections.len());
    for (d, ete) in doc.detections.iter().zip(text_vectors) {
        // crops is keyed by frame id, so the first entry is the earliest cropped frame
        let crop = d.crops.values().next();
        let locator = crop.cloned().unwrap_or_else(|| placeholder_locator(&d.label));
        let image = embedder.embed_image(&locator).map_err(backend)?;
        entities.push(EntityRecord {
            vid: vid.clone(),
            eid: d.eid,
            label: d.label.clone(),
            ete,
            eie: image.vector,
            frame_ids: d.frame_ids.clone(),
            image_fallback: crop.is_none() || image.fallback,
        });
    }
    entities.sort_by_key(|e| e.eid);

    let rows = doc
        .triples
        .iter()
        .map(|t| RelationshipRow { vid: vid.clone(), fid: t.fid, sid: t.sid, rl: t.rl.clone(), oid: t.oid })
        .collect();

    Ok(PreparedSegment {
        segment: doc.segment.clone(),
        embed_text_calls: doc.detections.len(),
        embed_image_calls: doc.detections.len(),
        entities,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SegmentationError {
    #[error("video has no frames")]
    NoFrames,
    #[error("segment length must be positive")]
    ZeroLength,
}

/// Splits `total_frames` frames, numbered from `first_frame`, into
/// consecutive non-overlapping segments of `segment_length` frames (the last
/// may be shorter). Segment ids are `{prefix}-{index:03}`.
pub fn segment_range(
    first_frame: FrameId,
    total_frames: usize,
    segment_length: usize,
    fps: Fps,
    source_video: &str,
    prefix: &str,
) -> Result<Vec<VideoSegment>, SegmentationError> {
    if total_frames == 0 {
        return Err(SegmentationError::NoFrames);
    }
    if segment_length == 0 {
        return Err(SegmentationError::ZeroLength);
    }
    let frames: Vec<FrameId> = (0..total_frames).map(|i| first_frame + i as FrameId).collect();
    Ok(frames
        .chunks(segment_length)
        .enumerate()
        .map(|(i, chunk)| VideoSegment {
            vid: format!("{prefix}-{i:03}"),
            source_video: source_video.to_owned(),
            fps,
            frame_ids: chunk.to_vec(),
            frame_images: BTreeMap::new(),
        })
        .collect())
}

/// `segment_range` over frames `0..total_frames`, prefixed by the source name.
pub fn segment_frames(
    total_frames: usize,
    segment_length: usize,
    fps: Fps,
    source_video: &str,
) -> Result<Vec<VideoSegment>, SegmentationError> {
    segment_range(0, total_frames, segment_length, fps, source_video, source_video)
}

/// Re-segments a document covering more than `segment_length` frames into
/// documents of at most that many frames. Entity ids are kept; detections,
/// crops and triples are restricted to each piece.
pub fn split_document(
    doc: &SceneGraphDocument,
    segment_length: usize,
) -> Result<Vec<SceneGraphDocument>, SegmentationError> {
    if segment_length == 0 {
        return Err(SegmentationError::ZeroLength);
    }
    if doc.segment.frame_ids.len() <= segment_length {
        return Ok(vec![doc.clone()]);
    }
    let seg = &doc.segment;
    let first = seg.first_frame().ok_or(SegmentationError::NoFrames)?;
    let pieces = segment_range(first, seg.frame_ids.len(), segment_length, seg.fps, &seg.source_video, &seg.vid)?;
    Ok(pieces
        .into_iter()
        .map(|mut piece| {
            let (lo, hi) = (piece.frame_ids[0], *piece.frame_ids.last().unwrap());
            let inside = |f: &FrameId| (lo..=hi).contains(f);
            piece.frame_images = seg.frame_images.iter().filter(|(f, _)| inside(f)).map(|(f, l)| (*f, l.clone())).collect();
            let detections = doc
                .detections
                .iter()
                .filter_map(|d| {
                    let frame_ids: Vec<FrameId> = d.frame_ids.iter().copied().filter(inside).collect();
                    (!frame_ids.is_empty()).then(|| Detection {
                        eid: d.eid,
                        label: d.label.clone(),
                        frame_ids,
                        crops: d.crops.iter().filter(|(f, _)| inside(f)).map(|(f, l)| (*f, l.clone())).collect(),
                    })
                })
                .collect();
            let triples = doc.triples.iter().filter(|t| inside(&t.fid)).cloned().collect();
            SceneGraphDocument { segment: piece, detections, triples }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::MockEmbedder;
    use proptest::prelude::*;

    fn fps() -> Fps {
        Fps::integer(2).unwrap()
    }

    pub(crate) fn small_doc(vid: &str) -> SceneGraphDocument {
        SceneGraphDocument {
            segment: VideoSegment {
                vid: vid.into(),
                source_video: "cam".into(),
                fps: fps(),
                frame_ids: (0..10).collect(),
                frame_images: BTreeMap::new(),
            },
            detections: vec![
                Detection { eid: 1, label: "man".into(), frame_ids: (0..10).collect(), crops: BTreeMap::from([(2, format!("{vid}/1/2.jpg"))]) },
                Detection { eid: 2, label: "bicycle".into(), frame_ids: (0..5).collect(), crops: BTreeMap::new() },
                Detection { eid: 3, label: "dog".into(), frame_ids: (4..10).collect(), crops: BTreeMap::new() },
            ],
            triples: vec![
                ObservedTriple { fid: 0, sid: 1, rl: "near".into(), oid: 2 },
                ObservedTriple { fid: 1, sid: 1, rl: "near".into(), oid: 2 },
                ObservedTriple { fid: 4, sid: 3, rl: "leftOf".into(), oid: 2 },
                ObservedTriple { fid: 8, sid: 3, rl: "near".into(), oid: 1 },
            ],
        }
    }

    #[test]
    fn prepare_counts_calls() {
        let m = MockEmbedder::default();
        let p = prepare_segment(&small_doc("v"), &m).unwrap();
        assert_eq!(p.entities.len(), 3);
        assert_eq!(p.rows.len(), 4);
        assert_eq!(p.embed_text_calls, 3);
        assert_eq!(p.embed_image_calls, 3);
        // no sidecar for the crop: still flagged
        assert!(p.entities.iter().all(|e| e.image_fallback));
    }

    #[test]
    fn document_validation() {
        let mut d = small_doc("v");
        d.triples.push(ObservedTriple { fid: 9, sid: 2, rl: "near".into(), oid: 1 });
        assert_eq!(d.validate(), Err(DocumentError::EntityAbsent { index: 4, eid: 2, fid: 9 }));

        let mut d = small_doc("v");
        d.triples.push(ObservedTriple { fid: 1, sid: 7, rl: "near".into(), oid: 1 });
        assert_eq!(d.validate(), Err(DocumentError::UnknownEntity { index: 4, eid: 7 }));

        let mut d = small_doc("v");
        d.triples.push(d.triples[0].clone());
        assert_eq!(d.validate(), Err(DocumentError::DuplicateTriple { index: 4 }));

        let mut d = small_doc("v");
        d.segment.frame_ids = vec![0, 1, 3];
        assert_eq!(d.validate(), Err(DocumentError::NonContiguousFrames));

        let mut d = small_doc("v");
        d.detections[1].crops.insert(7, "x".into());
        assert_eq!(d.validate(), Err(DocumentError::CropOutsideTrack { eid: 2, fid: 7 }));

        let mut d = small_doc("v");
        d.triples[0].oid = 1;
        assert_eq!(d.validate(), Err(DocumentError::SelfRelation { index: 0, eid: 1 }));
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let d = small_doc("v");
        assert_eq!(SceneGraphDocument::from_json(&d.to_json()).unwrap(), d);
        let bad = d.to_json().replacen("\"detections\"", "\"extra\": 1, \"detections\"", 1);
        assert!(SceneGraphDocument::from_json(&bad).is_err());
    }

    #[test]
    fn eleven_segments_from_2200_frames() {
        let segs = segment_frames(2200, 200, fps(), "street-02").unwrap();
        assert_eq!(segs.len(), 11);
        assert!(segs.iter().all(|s| s.frame_ids.len() == 200));
        assert_eq!(segs[10].vid, "street-02-010");
    }

    #[test]
    fn single_frame_video() {
        let segs = segment_frames(1, 200, fps(), "v").unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].frame_ids, vec![0]);
        assert_eq!(segment_frames(0, 10, fps(), "v"), Err(SegmentationError::NoFrames));
        assert_eq!(segment_frames(5, 0, fps(), "v"), Err(SegmentationError::ZeroLength));
    }

    proptest! {
        #[test]
        fn segmentation_arithmetic(n in 1usize..5000, m in 1usize..700) {
            let segs = segment_frames(n, m, fps(), "v").unwrap();
            prop_assert_eq!(segs.len(), n.div_ceil(m));
            let all: Vec<FrameId> = segs.iter().flat_map(|s| s.frame_ids.iter().copied()).collect();
            prop_assert_eq!(all, (0..n as FrameId).collect::<Vec<_>>());
            for s in &segs[..segs.len() - 1] {
                prop_assert_eq!(s.frame_ids.len(), m);
            }
        }
    }

    #[test]
    fn split_document_restricts_pieces() {
        let pieces = split_document(&small_doc("v"), 4).unwrap();
        assert_eq!(pieces.len(), 3);
        assert_eq!(pieces[0].segment.vid, "v-000");
        assert_eq!(pieces[2].segment.frame_ids, vec![8, 9]);
        for p in &pieces {
            p.validate().unwrap();
        }
        assert_eq!(pieces[0].triples.len(), 2);
        assert_eq!(pieces[1].triples.len(), 1);
        assert_eq!(pieces[2].detections.iter().map(|d| d.eid).collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(pieces[0].detections[0].crops.len(), 1);
        let whole = split_document(&small_doc("v"), 10).unwrap();
        assert_eq!(whole, vec![small_doc("v")]);
    }
}
