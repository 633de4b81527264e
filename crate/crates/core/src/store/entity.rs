//! Entity store: tracked entities with text and image embeddings, searched by
//! exhaustive cosine scan.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::codec::{CodecError, Reader, Writer};
use super::StoreError;
use crate::backends::{BackendError, Embedder};
use crate::model::{EntityId, EntityRecord, HyperParams, SegmentId};

const MAGIC: &[u8; 4] = b"SQEN";
const VERSION: u16 = 1;
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum SimilarityError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero vector")]
    ZeroVector,
}

/// `a·b / (‖a‖‖b‖)`, accumulated in f64 and clamped to [-1, 1].
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::DimensionMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// A store record that passed the similarity thresholds for a query text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMatch {
    pub vid: SegmentId,
    pub eid: EntityId,
    pub text_score: f64,
    pub image_score: f64,
    /// `max(text_score, image_score)`.
    pub combined_score: f64,
}

impl EntityMatch {
    fn rank(a: &Self, b: &Self) -> Ordering {
        b.combined_score
            .total_cmp(&a.combined_score)
            .then_with(|| a.vid.cmp(&b.vid))
            .then_with(|| a.eid.cmp(&b.eid))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityStore {
    dimension: usize,
    segments: BTreeMap<SegmentId, Vec<EntityRecord>>,
}

impl EntityStore {
    pub fn new(dimension: usize) -> Self {
        Self { dimension, segments: BTreeMap::new() }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.segments.values().map(Vec::len).sum()
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

    pub fn segment(&self, vid: &str) -> Option<&[EntityRecord]> {
        self.segments.get(vid).map(Vec::as_slice)
    }

    pub fn segment_ids(&self) -> impl Iterator<Item = &SegmentId> {
        self.segments.keys()
    }

    pub fn get(&self, vid: &str, eid: EntityId) -> Option<&EntityRecord> {
        let records = self.segments.get(vid)?;
        records.binary_search_by_key(&eid, |r| r.eid).ok().map(|i| &records[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &EntityRecord> {
        self.segments.values().flatten()
    }

    fn check_records(&self, vid: &str, records: &mut [EntityRecord]) -> Result<(), StoreError> {
        records.sort_by_key(|r| r.eid);
        let mut seen = HashSet::new();
        for r in records.iter() {
            if r.vid != vid {
                return Err(StoreError::ForeignRecord { expected: vid.into(), found: r.vid.clone() });
            }
            if !seen.insert(r.eid) {
                return Err(StoreError::DuplicateEntity { vid: vid.into(), eid: r.eid });
            }
            for (name, v) in [("ete", &r.ete), ("eie", &r.eie)] {
                let bad = |reason: String| StoreError::BadEmbedding { vid: vid.into(), eid: r.eid, reason };
                if v.len() != self.dimension {
                    return Err(bad(format!("{name} has dimension {}, store uses {}", v.len(), self.dimension)));
                }
                let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(bad(format!("{name} has norm {norm}")));
                }
            }
        }
        Ok(())
    }

    pub fn insert_segment(&mut self, vid: &str, mut records: Vec<EntityRecord>) -> Result<(), StoreError> {
        if self.segments.contains_key(vid) {
            return Err(StoreError::DuplicateSegment(vid.into()));
        }
        self.check_records(vid, &mut records)?;
        self.segments.insert(vid.into(), records);
        Ok(())
    }

    /// Inserts or replaces one segment's records; returns the previous ones.
    pub fn replace_segment(
        &mut self,
        vid: &str,
        mut records: Vec<EntityRecord>,
    ) -> Result<Option<Vec<EntityRecord>>, StoreError> {
        self.check_records(vid, &mut records)?;
        Ok(self.segments.insert(vid.into(), records))
    }

    pub fn remove_segment(&mut self, vid: &str) -> Option<Vec<EntityRecord>> {
        self.segments.remove(vid)
    }

    /// Embeds `query_text` once and scans every record.
    pub fn search_entities(
        &self,
        query_text: &str,
        embedder: &dyn Embedder,
        params: &HyperParams,
    ) -> Result<Vec<EntityMatch>, BackendError> {
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let q = embedder.embed_text(query_text)?;
        if q.len() != self.dimension {
            return Err(BackendError::Parse(format!(
                "query embedding has dimension {}, store uses {}",
                q.len(),
                self.dimension
            )));
        }
        Ok(self.search_vector(&q, params))
    }

    /// Records whose text score clears the relaxed text threshold or whose
    /// image score clears the relaxed image threshold, best first.
    pub fn search_vector(&self, query: &[f32], params: &HyperParams) -> Vec<EntityMatch> {
        let text_min = params.effective(params.text_threshold);
        let image_min = params.effective(params.image_threshold);
        let mut out: Vec<EntityMatch> = self
            .iter()
            .filter_map(|r| {
                let text_score = cosine_similarity(query, &r.ete).ok()?;
                let image_score = cosine_similarity(query, &r.eie).ok()?;
                (text_score >= text_min || image_score >= image_min).then(|| EntityMatch {
                    vid: r.vid.clone(),
                    eid: r.eid,
                    text_score,
                    image_score,
                    combined_score: text_score.max(image_score),
                })
            })
            .collect();
        out.sort_by(EntityMatch::rank);
        out
    }

    /// Serialized bytes of one segment's records, as embedded in the store
    /// file. Unchanged segments keep identical bytes across updates.
    pub fn encode_segment(&self, vid: &str) -> Option<Vec<u8>> {
        let records = self.segments.get(vid)?;
        let mut w = Writer::new();
        w.str(vid);
        w.len_u32(records.len());
        for r in records {
            w.u32(r.eid);
            w.str(&r.label);
            w.u8(u8::from(r.image_fallback));
            w.u32s(&r.frame_ids);
            w.f32s(&r.ete);
            w.f32s(&r.eie);
        }
        Some(w.finish())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.len_u32(self.dimension);
        w.len_u32(self.segments.len());
        for vid in self.segments.keys() {
            w.block(&self.encode_segment(vid).expect("segment exists"));
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        r.header(MAGIC, VERSION)?;
        let dimension = r.len()?;
        let count = r.len()?;
        let mut store = Self::new(dimension);
        for _ in 0..count {
            let mut s = Reader::new(r.block()?);
            let vid = s.str()?;
            let n = s.len()?;
            let mut records = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let eid = s.u32()?;
                let label = s.str()?;
                let image_fallback = match s.u8()? {
                    0 => false,
                    1 => true,
                    f => return Err(CodecError::Corrupt(format!("flag byte {f}"))),
                };
                let frame_ids = s.u32s()?;
                let ete = s.f32s(dimension)?;
                let eie = s.f32s(dimension)?;
                records.push(EntityRecord { vid: vid.clone(), eid, label, ete, eie, frame_ids, image_fallback });
            }
            s.finish()?;
            if records.windows(2).any(|w| w[0].eid >= w[1].eid) {
                return Err(CodecError::Corrupt(format!("segment {vid:?} records out of order")));
            }
            if store.segments.insert(vid.clone(), records).is_some() {
                return Err(CodecError::Corrupt(format!("segment {vid:?} repeated")));
            }
        }
        r.finish()?;
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::MockEmbedder;
    use crate::backends::normalize;
    use proptest::prelude::*;

    fn record(vid: &str, eid: EntityId, label: &str, m: &MockEmbedder) -> EntityRecord {
        let ete = m.embed_text(label).unwrap();
        EntityRecord {
            vid: vid.into(),
            eid,
            label: label.into(),
            eie: m.embed_image(&format!("{vid}/{eid}")).unwrap().vector,
            ete,
            frame_ids: vec![0, 1],
            image_fallback: true,
        }
    }

    fn store(m: &MockEmbedder) -> EntityStore {
        let mut s = EntityStore::new(m.dimension());
        s.insert_segment("v1", vec![record("v1", 2, "bicycle", m), record("v1", 1, "man in red", m)]).unwrap();
        s.insert_segment("v2", vec![record("v2", 1, "dog", m), record("v2", 5, "bicycle", m)]).unwrap();
        s
    }

    /// Same quantity via a compensated (Neumaier) summation over f64 terms.
    fn cosine_reference(a: &[f32], b: &[f32]) -> f64 {
        fn neumaier(terms: impl Iterator<Item = f64>) -> f64 {
            let (mut sum, mut c) = (0f64, 0f64);
            for t in terms {
                let s = sum + t;
                c += if sum.abs() >= t.abs() { (sum - s) + t } else { (t - s) + sum };
                sum = s;
            }
            sum + c
        }
        let dot = neumaier(a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)));
        let na = neumaier(a.iter().map(|x| f64::from(*x).powi(2))).sqrt();
        let nb = neumaier(b.iter().map(|x| f64::from(*x).powi(2))).sqrt();
        dot / (na * nb)
    }

    #[test]
    fn cosine_identity_and_antipode() {
        let v = [0.3f32, -1.2, 4.0, 0.001];
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-9);
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-9);
        assert_eq!(cosine_similarity(&v, &v[..2]), Err(SimilarityError::DimensionMismatch(4, 2)));
        assert_eq!(cosine_similarity(&v, &[0.0; 4]), Err(SimilarityError::ZeroVector));
    }

    #[test]
    fn cosine_matches_reference_on_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let d = rng.random_range(1..300);
            let a: Vec<f32> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
            let b: Vec<f32> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
            let got = cosine_similarity(&a, &b).unwrap();
            assert!((got - cosine_reference(&a, &b)).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_label_ranks_first() {
        let m = MockEmbedder::default();
        let s = store(&m);
        let hits = s.search_entities("bicycle", &m, &HyperParams::default()).unwrap();
        assert_eq!(hits.len(), 2);
        assert!((hits[0].text_score - 1.0).abs() < 1e-6);
        // equal scores tie-break on (vid, eid)
        assert_eq!((hits[0].vid.as_str(), hits[0].eid), ("v1", 2));
        assert_eq!((hits[1].vid.as_str(), hits[1].eid), ("v2", 5));
        for h in &hits {
            assert_eq!(h.combined_score, h.text_score.max(h.image_score));
        }
    }

    #[test]
    fn empty_store_returns_nothing() {
        let m = MockEmbedder::default();
        let s = EntityStore::new(m.dimension());
        assert!(s.search_entities("bicycle", &m, &HyperParams::default()).unwrap().is_empty());
    }

    #[test]
    fn insert_checks() {
        let m = MockEmbedder::default();
        let mut s = store(&m);
        assert_eq!(
            s.insert_segment("v1", vec![]),
            Err(StoreError::DuplicateSegment("v1".into()))
        );
        let dup = vec![record("v3", 1, "a", &m), record("v3", 1, "b", &m)];
        assert!(matches!(s.insert_segment("v3", dup), Err(StoreError::DuplicateEntity { .. })));
        let mut bad = record("v3", 1, "a", &m);
        bad.ete[0] += 0.5;
        assert!(matches!(s.insert_segment("v3", vec![bad]), Err(StoreError::BadEmbedding { .. })));
        let foreign = record("v9", 1, "a", &m);
        assert!(matches!(s.insert_segment("v3", vec![foreign]), Err(StoreError::ForeignRecord { .. })));
        assert!(!s.contains_segment("v3"));
    }

    #[test]
    fn bytes_round_trip() {
        let m = MockEmbedder::new(3, 16);
        let s = store(&m);
        let bytes = s.to_bytes();
        let back = EntityStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
        assert!(EntityStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(EntityStore::from_bytes(&extra).is_err());
    }

    fn random_store(seed: u64, n: usize, dim: usize) -> EntityStore {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut s = EntityStore::new(dim);
        let unit = |rng: &mut rand_chacha::ChaCha8Rng| {
            normalize((0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
        };
        for seg in 0..(n / 4 + 1) {
            let vid = format!("v{seg:02}");
            let recs = (0..4)
                .map(|eid| EntityRecord {
                    vid: vid.clone(),
                    eid,
                    label: format!("l{eid}"),
                    ete: unit(&mut rng),
                    eie: unit(&mut rng),
                    frame_ids: vec![],
                    image_fallback: false,
                })
                .collect();
            s.insert_segment(&vid, recs).unwrap();
        }
        s
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn raising_threshold_never_adds(seed in 0u64..1000, t in 0.0f64..0.9, dt in 0.0f64..0.1, temp in 0.0f64..0.9) {
            let s = random_store(seed, 24, 4);
            let q = normalize(vec![1.0, 0.5, -0.25, 0.1]).unwrap();
            let lo = HyperParams { text_threshold: t, image_threshold: t, temperature: temp, ..Default::default() };
            let hi_text = HyperParams { text_threshold: t + dt, ..lo.clone() };
            let hi_image = HyperParams { image_threshold: t + dt, ..lo.clone() };
            let base: HashSet<_> = s.search_vector(&q, &lo).into_iter().map(|m| (m.vid, m.eid)).collect();
            for p in [hi_text, hi_image] {
                for m in s.search_vector(&q, &p) {
                    prop_assert!(base.contains(&(m.vid, m.eid)));
                }
            }
        }

        #[test]
        fn temperature_relaxes_monotonically(seed in 0u64..1000, t in 0.0f64..1.0) {
            let s = random_store(seed, 24, 4);
            let q = normalize(vec![-0.3, 0.5, 0.25, 0.9]).unwrap();
            let cold = HyperParams { text_threshold: t, image_threshold: t, temperature: 0.0, ..Default::default() };
            let warm = HyperParams { temperature: 0.5, ..cold.clone() };
            let warm_set: HashSet<_> = s.search_vector(&q, &warm).into_iter().map(|m| (m.vid, m.eid)).collect();
            for m in s.search_vector(&q, &cold) {
                prop_assert!(warm_set.contains(&(m.vid, m.eid)));
            }
        }
    }
}
