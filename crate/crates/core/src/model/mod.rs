//! Domain types shared by every stage of the pipeline.
//!
//! Everything here is plain data: immutable after construction and safe to
//! share across worker threads.

mod query;
mod validate;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use query::{
    parse_query, EntityDecl, FrameSpec, ParseError, QuerySpec, RelationDecl, TemporalConstraint,
    TemporalOp, TripleRef,
};
pub use validate::{validate_query, DifferenceBounds, Finding, ValidationReport};

/// Identifier of a video segment (clip). Unique within a dataset.
pub type SegmentId = String;
/// Tracked entity identifier, unique within its segment.
pub type EntityId = u32;
/// Frame identifier, global within the source video.
pub type FrameId = u32;

/// Frames per second as a positive rational.
///
/// Serialized as a bare integer when the denominator is 1 and as `"num/den"`
/// otherwise (e.g. `"30000/1001"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fps {
    num: u32,
    den: u32,
}

impl Fps {
    pub fn new(num: u32, den: u32) -> Option<Self> {
        (num > 0 && den > 0).then_some(Self { num, den })
    }

    pub fn integer(fps: u32) -> Option<Self> {
        Self::new(fps, 1)
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }

    /// Converts a duration in seconds to a frame count, rounding to the
    /// nearest frame. 2 s at 2 fps is 4 frames.
    pub fn frames_for_seconds(&self, seconds: f64) -> i64 {
        (seconds * self.as_f64()).round() as i64
    }
}

impl fmt::Display for Fps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl Serialize for Fps {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.den == 1 {
            serializer.serialize_u32(self.num)
        } else {
            serializer.serialize_str(&self.to_string())
        }
    }
}

impl<'de> Deserialize<'de> for Fps {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u32),
            Text(String),
        }
        let invalid = || serde::de::Error::custom("fps must be a positive integer or \"num/den\"");
        match Raw::deserialize(deserializer)? {
            Raw::Int(n) => Fps::integer(n).ok_or_else(invalid),
            Raw::Text(s) => {
                let (n, d) = s.split_once('/').ok_or_else(invalid)?;
                let n = n.trim().parse().map_err(|_| invalid())?;
                let d = d.trim().parse().map_err(|_| invalid())?;
                Fps::new(n, d).ok_or_else(invalid)
            }
        }
    }
}

/// A fixed-length, non-overlapping run of frames of one source video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoSegment {
    pub vid: SegmentId,
    pub source_video: String,
    pub fps: Fps,
    pub frame_ids: Vec<FrameId>,
    /// Opaque locators of full-frame images, handed to the verifier as-is.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub frame_images: BTreeMap<FrameId, String>,
}

impl VideoSegment {
    pub fn first_frame(&self) -> Option<FrameId> {
        self.frame_ids.first().copied()
    }

    pub fn last_frame(&self) -> Option<FrameId> {
        self.frame_ids.last().copied()
    }

    pub fn contains_frame(&self, fid: FrameId) -> bool {
        self.frame_ids.binary_search(&fid).is_ok()
    }

    /// `frame_ids` are non-empty, strictly increasing and contiguous.
    pub fn frames_are_contiguous(&self) -> bool {
        !self.frame_ids.is_empty() && self.frame_ids.windows(2).all(|w| w[1] == w[0] + 1)
    }

    /// Locator passed to the verifier for one frame of this segment. Falls
    /// back to a synthetic `frame://vid/fid` locator when no image is known.
    pub fn frame_locator(&self, fid: FrameId) -> String {
        match self.frame_images.get(&fid) {
            Some(loc) => loc.clone(),
            None => format!("frame://{}/{}", self.vid, fid),
        }
    }
}

/// One tracked entity within a segment with its two embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityRecord {
    pub vid: SegmentId,
    pub eid: EntityId,
    pub label: String,
    /// Text embedding of `label`.
    pub ete: Vec<f32>,
    /// Image embedding of the entity's appearance.
    pub eie: Vec<f32>,
    pub frame_ids: Vec<FrameId>,
    /// Set when `eie` was computed from a label-derived placeholder because
    /// the detection carried no crop locator, or the image backend had no
    /// data for it.
    pub image_fallback: bool,
}

/// One observed subject-predicate-object instance in one frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationshipRow {
    pub vid: SegmentId,
    pub fid: FrameId,
    pub sid: EntityId,
    pub rl: String,
    pub oid: EntityId,
}

/// Query-time knobs exposed to users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub top_k: usize,
    /// Relaxes every threshold multiplicatively: `t * (1 - temperature)`.
    pub temperature: f64,
    pub text_threshold: f64,
    pub image_threshold: f64,
    /// When set, candidate rows must also carry a label similar to the
    /// queried relationship text.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rel_label_threshold: Option<f64>,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            top_k: 3,
            temperature: 0.0,
            text_threshold: 0.8,
            image_threshold: 0.8,
            rel_label_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HyperParamError {
    #[error("top_k must be at least 1")]
    TopK,
    #[error("temperature must lie in [0, 1), got {0}")]
    Temperature(f64),
    #[error("{name} must lie in [0, 1], got {value}")]
    Threshold { name: &'static str, value: f64 },
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), HyperParamError> {
        if self.top_k == 0 {
            return Err(HyperParamError::TopK);
        }
        if !(0.0..1.0).contains(&self.temperature) {
            return Err(HyperParamError::Temperature(self.temperature));
        }
        let thresholds = [
            ("text_threshold", Some(self.text_threshold)),
            ("image_threshold", Some(self.image_threshold)),
            ("rel_label_threshold", self.rel_label_threshold),
        ];
        for (name, value) in thresholds {
            if let Some(value) = value {
                if !(0.0..=1.0).contains(&value) {
                    return Err(HyperParamError::Threshold { name, value });
                }
            }
        }
        Ok(())
    }

    /// Effective threshold after temperature relaxation.
    pub fn effective(&self, threshold: f64) -> f64 {
        threshold * (1.0 - self.temperature)
    }
}

/// Verifier confidence recorded for one triple of one query frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleEvidence {
    pub frame_index: usize,
    pub triple: TripleRef,
    pub subject_eid: EntityId,
    pub object_eid: EntityId,
    pub confidence: f64,
}

/// One satisfying assignment of the query to a segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub vid: SegmentId,
    /// Concrete frame id per query frame, indexed by frame position.
    pub frame_assignment: Vec<FrameId>,
    pub entity_bindings: BTreeMap<String, EntityId>,
    pub triple_evidence: Vec<TripleEvidence>,
    pub score: f64,
}
