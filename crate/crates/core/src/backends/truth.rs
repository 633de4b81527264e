use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::model::{FrameId, SegmentId};

/// Ground-truth sidecar for one segment, stored next to its scene-graph
/// document as `<name>.truth.json`.
///
/// `frames` lists, per frame, the triple texts that visually hold in it;
/// `image_labels` names what each crop locator depicts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentTruth {
    pub vid: SegmentId,
    #[serde(default)]
    pub image_labels: BTreeMap<String, String>,
    #[serde(default)]
    pub frames: BTreeMap<FrameId, BTreeSet<String>>,
}

#[derive(Debug, thiserror::Error)]
pub enum GroundTruthError {
    #[error("segment {0:?} has more than one ground-truth sidecar")]
    DuplicateSegment(String),
    #[error("image locator {locator:?} labelled differently by segments {first:?} and {second:?}")]
    ConflictingLocator { locator: String, first: String, second: String },
}

/// Merged ground truth across the segments of a dataset.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    segments: HashMap<SegmentId, SegmentTruth>,
    image_labels: HashMap<String, (String, SegmentId)>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_segments(
        segments: impl IntoIterator<Item = SegmentTruth>,
    ) -> Result<Self, GroundTruthError> {
        let mut truth = Self::new();
        for s in segments {
            truth.insert(s)?;
        }
        Ok(truth)
    }

    pub fn insert(&mut self, segment: SegmentTruth) -> Result<(), GroundTruthError> {
        if self.segments.contains_key(&segment.vid) {
            return Err(GroundTruthError::DuplicateSegment(segment.vid));
        }
        self.check_locators(&segment)?;
        for (loc, label) in &segment.image_labels {
            self.image_labels.insert(loc.clone(), (label.clone(), segment.vid.clone()));
        }
        self.segments.insert(segment.vid.clone(), segment);
        Ok(())
    }

    /// Inserts or replaces the sidecar of one segment.
    pub fn upsert(&mut self, segment: SegmentTruth) -> Result<(), GroundTruthError> {
        if let Some(old) = self.segments.remove(&segment.vid) {
            for loc in old.image_labels.keys() {
                self.image_labels.remove(loc);
            }
            if let Err(e) = self.check_locators(&segment) {
                self.insert(old).expect("restoring previous sidecar");
                return Err(e);
            }
        }
        self.insert(segment)
    }

    fn check_locators(&self, segment: &SegmentTruth) -> Result<(), GroundTruthError> {
        for (loc, label) in &segment.image_labels {
            if let Some((existing, owner)) = self.image_labels.get(loc) {
                if existing != label {
                    return Err(GroundTruthError::ConflictingLocator {
                        locator: loc.clone(),
                        first: owner.clone(),
                        second: segment.vid.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn segment(&self, vid: &str) -> Option<&SegmentTruth> {
        self.segments.get(vid)
    }

    pub fn holds(&self, vid: &str, fid: FrameId, triple_text: &str) -> bool {
        self.segments
            .get(vid)
            .and_then(|s| s.frames.get(&fid))
            .is_some_and(|texts| texts.contains(triple_text))
    }

    pub fn image_label(&self, locator: &str) -> Option<&str> {
        self.image_labels.get(locator).map(|(label, _)| label.as_str())
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(vid: &str, loc: &str, label: &str) -> SegmentTruth {
        let mut s = SegmentTruth { vid: vid.into(), ..Default::default() };
        s.image_labels.insert(loc.into(), label.into());
        s.frames.entry(3).or_default().insert("dog near car".into());
        s
    }

    #[test]
    fn lookup() {
        let t = GroundTruth::from_segments([seg("a", "a/1.jpg", "dog")]).unwrap();
        assert!(t.holds("a", 3, "dog near car"));
        assert!(!t.holds("a", 4, "dog near car"));
        assert!(!t.holds("b", 3, "dog near car"));
        assert_eq!(t.image_label("a/1.jpg"), Some("dog"));
    }

    #[test]
    fn conflicts_rejected_and_upsert_restores() {
        let mut t = GroundTruth::from_segments([seg("a", "x.jpg", "dog"), seg("b", "y.jpg", "cat")]).unwrap();
        assert!(matches!(t.insert(seg("a", "z.jpg", "dog")), Err(GroundTruthError::DuplicateSegment(_))));
        assert!(matches!(
            t.upsert(seg("b", "x.jpg", "cat")),
            Err(GroundTruthError::ConflictingLocator { .. })
        ));
        assert_eq!(t.image_label("y.jpg"), Some("cat"));
        t.upsert(seg("b", "w.jpg", "bird")).unwrap();
        assert_eq!(t.image_label("y.jpg"), None);
        assert_eq!(t.image_label("w.jpg"), Some("bird"));
    }
}
