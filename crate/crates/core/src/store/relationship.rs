//! Relationship store: per-frame SPO rows with secondary indexes on
//! `(vid, sid)` and `(vid, oid)`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::codec::{CodecError, Reader, Writer};
use super::entity::{cosine_similarity, EntityMatch};
use super::StoreError;
use crate::backends::{BackendError, Embedder};
use crate::model::{EntityId, FrameId, HyperParams, RelationshipRow, SegmentId};

const MAGIC: &[u8; 4] = b"SQRL";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Subject,
    Object,
    Either,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct SegmentRows {
    rows: Vec<RelationshipRow>,
    by_subject: HashMap<EntityId, Vec<u32>>,
    by_object: HashMap<EntityId, Vec<u32>>,
}

impl SegmentRows {
    fn build(mut rows: Vec<RelationshipRow>) -> Self {
        rows.sort();
        let mut by_subject: HashMap<EntityId, Vec<u32>> = HashMap::new();
        let mut by_object: HashMap<EntityId, Vec<u32>> = HashMap::new();
        for (i, r) in rows.iter().enumerate() {
            by_subject.entry(r.sid).or_default().push(i as u32);
            by_object.entry(r.oid).or_default().push(i as u32);
        }
        Self { rows, by_subject, by_object }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelationshipStore {
    segments: BTreeMap<SegmentId, SegmentRows>,
}

impl RelationshipStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.segments.values().map(|s| s.rows.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn contains_segment(&self, vid: &str) -> bool {
        self.segments.contains_key(vid)
    }

    pub fn segment(&self, vid: &str) -> Option<&[RelationshipRow]> {
        self.segments.get(vid).map(|s| s.rows.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = &RelationshipRow> {
        self.segments.values().flat_map(|s| s.rows.iter())
    }

    /// Frames of a segment carrying at least one row.
    pub fn frames_with_rows(&self, vid: &str) -> BTreeSet<FrameId> {
        self.segment(vid).into_iter().flatten().map(|r| r.fid).collect()
    }

    fn check_rows(vid: &str, rows: &[RelationshipRow]) -> Result<(), StoreError> {
        let mut seen = HashSet::new();
        for r in rows {
            if r.vid != vid {
                return Err(StoreError::ForeignRecord { expected: vid.into(), found: r.vid.clone() });
            }
            if !seen.insert(r) {
                return Err(StoreError::DuplicateRow {
                    vid: vid.into(),
                    row: format!("({}, {}, {}, {})", r.fid, r.sid, r.rl, r.oid),
                });
            }
        }
        Ok(())
    }

    pub fn insert_segment(&mut self, vid: &str, rows: Vec<RelationshipRow>) -> Result<(), StoreError> {
        if self.segments.contains_key(vid) {
            return Err(StoreError::DuplicateSegment(vid.into()));
        }
        Self::check_rows(vid, &rows)?;
        self.segments.insert(vid.into(), SegmentRows::build(rows));
        Ok(())
    }

    pub fn replace_segment(
        &mut self,
        vid: &str,
        rows: Vec<RelationshipRow>,
    ) -> Result<Option<Vec<RelationshipRow>>, StoreError> {
        Self::check_rows(vid, &rows)?;
        Ok(self.segments.insert(vid.into(), SegmentRows::build(rows)).map(|s| s.rows))
    }

    pub fn remove_segment(&mut self, vid: &str) -> Option<Vec<RelationshipRow>> {
        self.segments.remove(vid).map(|s| s.rows)
    }

    /// Rows whose subject (or object, or either) is one of the matched
    /// entities. Output follows store order: `(vid, fid, sid, rl, oid)`.
    pub fn candidate_frames(&self, matches: &[EntityMatch], role: Role) -> Vec<&RelationshipRow> {
        let mut wanted: BTreeMap<&str, HashSet<EntityId>> = BTreeMap::new();
        for m in matches {
            wanted.entry(m.vid.as_str()).or_default().insert(m.eid);
        }
        let mut out = Vec::new();
        for (vid, eids) in wanted {
            let Some(seg) = self.segments.get(vid) else { continue };
            let mut hits: Vec<u32> = Vec::new();
            for eid in &eids {
                if matches!(role, Role::Subject | Role::Either) {
                    hits.extend(seg.by_subject.get(eid).into_iter().flatten());
                }
                if matches!(role, Role::Object | Role::Either) {
                    hits.extend(seg.by_object.get(eid).into_iter().flatten());
                }
            }
            hits.sort_unstable();
            hits.dedup();
            out.extend(hits.into_iter().map(|i| &seg.rows[i as usize]));
        }
        out
    }

    pub fn encode_segment(&self, vid: &str) -> Option<Vec<u8>> {
        let seg = self.segments.get(vid)?;
        let mut w = Writer::new();
        w.str(vid);
        w.len_u32(seg.rows.len());
        for r in &seg.rows {
            w.u32(r.fid);
            w.u32(r.sid);
            w.str(&r.rl);
            w.u32(r.oid);
        }
        Some(w.finish())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.len_u32(self.segments.len());
        for vid in self.segments.keys() {
            w.block(&self.encode_segment(vid).expect("segment exists"));
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        r.header(MAGIC, VERSION)?;
        let count = r.len()?;
        let mut store = Self::new();
        for _ in 0..count {
            let mut s = Reader::new(r.block()?);
            let vid = s.str()?;
            let n = s.len()?;
            let mut rows = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let fid = s.u32()?;
                let sid = s.u32()?;
                let rl = s.str()?;
                let oid = s.u32()?;
                rows.push(RelationshipRow { vid: vid.clone(), fid, sid, rl, oid });
            }
            s.finish()?;
            if rows.windows(2).any(|w| w[0] >= w[1]) {
                return Err(CodecError::Corrupt(format!("segment {vid:?} rows out of order")));
            }
            if store.segments.insert(vid.clone(), SegmentRows::build(rows)).is_some() {
                return Err(CodecError::Corrupt(format!("segment {vid:?} repeated")));
            }
        }
        r.finish()?;
        Ok(store)
    }
}

/// A stored row connecting a subject candidate to an object candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub vid: SegmentId,
    pub fid: FrameId,
    pub sid: EntityId,
    pub oid: EntityId,
    pub rl: String,
    pub subject_match: EntityMatch,
    pub object_match: EntityMatch,
}

/// Joins subject-side and object-side candidate rows on the stored row
/// itself (same vid, fid, sid, rl, oid), keeping rows whose subject is a
/// subject candidate and whose object is an object candidate.
///
/// With `params.rel_label_threshold` set, the stored label must also be
/// similar enough to `rel_text`. Output is sorted by `(vid, fid, sid, oid, rl)`.
pub fn join_triple(
    subject_rows: &[&RelationshipRow],
    object_rows: &[&RelationshipRow],
    subject_matches: &[EntityMatch],
    object_matches: &[EntityMatch],
    rel_text: &str,
    embedder: &dyn Embedder,
    params: &HyperParams,
) -> Result<Vec<CandidatePair>, BackendError> {
    let subjects: HashMap<(&str, EntityId), &EntityMatch> =
        subject_matches.iter().map(|m| ((m.vid.as_str(), m.eid), m)).collect();
    let objects: HashMap<(&str, EntityId), &EntityMatch> =
        object_matches.iter().map(|m| ((m.vid.as_str(), m.eid), m)).collect();
    let object_side: HashSet<&RelationshipRow> = object_rows.iter().copied().collect();

    let label_min = params.rel_label_threshold.map(|t| params.effective(t));
    let rel_vec = match label_min {
        Some(_) if !subject_rows.is_empty() && !object_rows.is_empty() => Some(embedder.embed_text(rel_text)?),
        _ => None,
    };
    let mut label_ok: HashMap<&str, bool> = HashMap::new();

    let mut out = Vec::new();
    for row in subject_rows {
        if !object_side.contains(*row) {
            continue;
        }
        let (Some(sm), Some(om)) = (
            subjects.get(&(row.vid.as_str(), row.sid)),
            objects.get(&(row.vid.as_str(), row.oid)),
        ) else {
            continue;
        };
        if let (Some(min), Some(q)) = (label_min, rel_vec.as_ref()) {
            let ok = match label_ok.get(row.rl.as_str()) {
                Some(ok) => *ok,
                None => {
                    let v = embedder.embed_text(&row.rl)?;
                    let ok = cosine_similarity(q, &v).is_ok_and(|s| s >= min);
                    label_ok.insert(row.rl.as_str(), ok);
                    ok
                }
            };
            if !ok {
                continue;
            }
        }
        out.push(CandidatePair {
            vid: row.vid.clone(),
            fid: row.fid,
            sid: row.sid,
            oid: row.oid,
            rl: row.rl.clone(),
            subject_match: (*sm).clone(),
            object_match: (*om).clone(),
        });
    }
    out.sort_by(|a, b| {
        (&a.vid, a.fid, a.sid, a.oid, &a.rl).cmp(&(&b.vid, b.fid, b.sid, b.oid, &b.rl))
    });
    out.dedup_by(|a, b| (&a.vid, a.fid, a.sid, a.oid, &a.rl) == (&b.vid, b.fid, b.sid, b.oid, &b.rl));
    Ok(out)
}

/// Human-readable relational filter issued for one query entity, shown by
/// `--explain` and the inspection panel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterPredicate {
    pub entity_key: String,
    pub role: Role,
    pub keys: Vec<(SegmentId, EntityId)>,
}

impl FilterPredicate {
    pub fn new(entity_key: &str, role: Role, matches: &[EntityMatch]) -> Self {
        let mut keys: Vec<_> = matches.iter().map(|m| (m.vid.clone(), m.eid)).collect();
        keys.sort();
        keys.dedup();
        Self { entity_key: entity_key.into(), role, keys }
    }
}

impl fmt::Display for FilterPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tuples = if self.keys.is_empty() {
            "(NULL, NULL)".to_owned()
        } else {
            self.keys
                .iter()
                .map(|(v, e)| format!("('{}', {e})", v.replace('\'', "''")))
                .collect::<Vec<_>>()
                .join(", ")
        };
        let cond = match self.role {
            Role::Subject => format!("(vid, sid) IN ({tuples})"),
            Role::Object => format!("(vid, oid) IN ({tuples})"),
            Role::Either => format!("(vid, sid) IN ({tuples}) OR (vid, oid) IN ({tuples})"),
        };
        write!(f, "-- {}\nSELECT vid, fid, sid, rl, oid FROM relationships WHERE {cond}", self.entity_key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::MockEmbedder;

    fn row(vid: &str, fid: FrameId, sid: EntityId, rl: &str, oid: EntityId) -> RelationshipRow {
        RelationshipRow { vid: vid.into(), fid, sid, rl: rl.into(), oid }
    }

    fn m(vid: &str, eid: EntityId) -> EntityMatch {
        EntityMatch { vid: vid.into(), eid, text_score: 1.0, image_score: 0.0, combined_score: 1.0 }
    }

    #[test]
    fn candidate_filter_direct() {
        let mut s = RelationshipStore::new();
        s.insert_segment("v1", vec![row("v1", 3, 7, "near", 9), row("v1", 4, 2, "near", 9)]).unwrap();
        let got = s.candidate_frames(&[m("v1", 7)], Role::Either);
        assert_eq!(got, vec![&row("v1", 3, 7, "near", 9)]);
        assert_eq!(s.candidate_frames(&[m("v1", 9)], Role::Subject).len(), 0);
        assert_eq!(s.candidate_frames(&[m("v1", 9)], Role::Object).len(), 2);
        assert!(s.candidate_frames(&[], Role::Either).is_empty());
        assert!(s.candidate_frames(&[m("v2", 7)], Role::Either).is_empty());
    }

    #[test]
    fn either_role_does_not_duplicate() {
        let mut s = RelationshipStore::new();
        s.insert_segment("v1", vec![row("v1", 1, 1, "near", 2)]).unwrap();
        assert_eq!(s.candidate_frames(&[m("v1", 1), m("v1", 2)], Role::Either).len(), 1);
    }

    #[test]
    fn disjoint_vids_join_empty() {
        let a = row("v1", 1, 1, "near", 2);
        let b = row("v2", 1, 1, "near", 2);
        let e = MockEmbedder::default();
        let out = join_triple(&[&a], &[&b], &[m("v1", 1)], &[m("v2", 2)], "near", &e, &HyperParams::default())
            .unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn label_filter_uses_similarity() {
        let rows = [row("v1", 1, 1, "leftOf", 2), row("v1", 2, 1, "rightOf", 2)];
        let refs: Vec<&RelationshipRow> = rows.iter().collect();
        let e = MockEmbedder::default();
        let subj = [m("v1", 1)];
        let obj = [m("v1", 2)];
        let unfiltered = join_triple(&refs, &refs, &subj, &obj, "leftOf", &e, &HyperParams::default()).unwrap();
        assert_eq!(unfiltered.len(), 2);
        let p = HyperParams { rel_label_threshold: Some(0.9), ..Default::default() };
        let filtered = join_triple(&refs, &refs, &subj, &obj, "leftOf", &e, &p).unwrap();
        assert_eq!(filtered.len(), 1);
        assert_eq!(filtered[0].rl, "leftOf");
        assert_eq!(filtered[0].fid, 1);
    }

    #[test]
    fn duplicate_rows_rejected() {
        let mut s = RelationshipStore::new();
        let r = row("v1", 1, 1, "near", 2);
        assert!(matches!(
            s.insert_segment("v1", vec![r.clone(), r]),
            Err(StoreError::DuplicateRow { .. })
        ));
        assert!(s.is_empty());
    }

    #[test]
    fn bytes_round_trip() {
        let mut s = RelationshipStore::new();
        s.insert_segment("b", vec![row("b", 9, 1, "on", 2), row("b", 3, 2, "under", 1)]).unwrap();
        s.insert_segment("a", vec![row("a", 0, 4, "isn't", 5)]).unwrap();
        let bytes = s.to_bytes();
        let back = RelationshipStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.segment("b").unwrap()[0].fid, 3);
    }

    #[test]
    fn filter_predicate_renders_sql() {
        let p = FilterPredicate::new("e2", Role::Subject, &[m("v'1", 4), m("v0", 2), m("v0", 2)]);
        let sql = p.to_string();
        assert!(sql.contains("WHERE (vid, sid) IN (('v''1', 4), ('v0', 2))"), "{sql}");
        let empty = FilterPredicate::new("e1", Role::Object, &[]).to_string();
        assert!(empty.contains("(vid, oid) IN ((NULL, NULL))"));
    }
}
