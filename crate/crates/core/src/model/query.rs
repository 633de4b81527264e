//! The four-part event query and its JSON document form.
//!
//! ```json
//! {
//!   "entities": [{"key": "e1", "text": "man with backpack"}],
//!   "relationships": [{"key": "r1", "text": "is near"}],
//!   "frames": [{"index": 0, "triples": [["e1", "r1", "e2"]]}],
//!   "temporal": [{"later": 1, "earlier": 0, "op": ">", "bound": 4}]
//! }
//! ```

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityDecl {
    pub key: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationDecl {
    pub key: String,
    pub text: String,
}

/// A `(subject_key, rel_key, object_key)` reference, written as a
/// three-element array in documents.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(String, String, String)", into = "(String, String, String)")]
pub struct TripleRef {
    pub subject: String,
    pub rel: String,
    pub object: String,
}

impl TripleRef {
    pub fn new(subject: impl Into<String>, rel: impl Into<String>, object: impl Into<String>) -> Self {
        Self { subject: subject.into(), rel: rel.into(), object: object.into() }
    }
}

impl From<(String, String, String)> for TripleRef {
    fn from((subject, rel, object): (String, String, String)) -> Self {
        Self { subject, rel, object }
    }
}

impl From<TripleRef> for (String, String, String) {
    fn from(t: TripleRef) -> Self {
        (t.subject, t.rel, t.object)
    }
}

impl fmt::Display for TripleRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.rel, self.object)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    pub index: usize,
    pub triples: Vec<TripleRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemporalOp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "=")]
    Eq,
}

impl TemporalOp {
    pub fn symbol(self) -> &'static str {
        match self {
            TemporalOp::Lt => "<",
            TemporalOp::Le => "<=",
            TemporalOp::Gt => ">",
            TemporalOp::Ge => ">=",
            TemporalOp::Eq => "=",
        }
    }

    pub fn holds(self, lhs: i64, rhs: i64) -> bool {
        match self {
            TemporalOp::Lt => lhs < rhs,
            TemporalOp::Le => lhs <= rhs,
            TemporalOp::Gt => lhs > rhs,
            TemporalOp::Ge => lhs >= rhs,
            TemporalOp::Eq => lhs == rhs,
        }
    }
}

/// `f[later] - f[earlier] OP bound`, in frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalConstraint {
    pub later: usize,
    pub earlier: usize,
    pub op: TemporalOp,
    pub bound: i64,
}

impl TemporalConstraint {
    pub fn holds(&self, later_fid: u32, earlier_fid: u32) -> bool {
        self.op.holds(i64::from(later_fid) - i64::from(earlier_fid), self.bound)
    }

    /// Inclusive interval `[lo, hi]` of admissible `f[later] - f[earlier]`.
    pub fn difference_interval(&self) -> (i64, i64) {
        match self.op {
            TemporalOp::Lt => (i64::MIN, self.bound.saturating_sub(1)),
            TemporalOp::Le => (i64::MIN, self.bound),
            TemporalOp::Gt => (self.bound.saturating_add(1), i64::MAX),
            TemporalOp::Ge => (self.bound, i64::MAX),
            TemporalOp::Eq => (self.bound, self.bound),
        }
    }
}

impl fmt::Display for TemporalConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{} - f{} {} {}", self.later, self.earlier, self.op.symbol(), self.bound)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    pub entities: Vec<EntityDecl>,
    pub relationships: Vec<RelationDecl>,
    pub frames: Vec<FrameSpec>,
    #[serde(default)]
    pub temporal: Vec<TemporalConstraint>,
}

impl QuerySpec {
    pub fn entity_index(&self, key: &str) -> Option<usize> {
        self.entities.iter().position(|e| e.key == key)
    }

    pub fn entity_text(&self, key: &str) -> Option<&str> {
        self.entities.iter().find(|e| e.key == key).map(|e| e.text.as_str())
    }

    pub fn relation_text(&self, key: &str) -> Option<&str> {
        self.relationships.iter().find(|r| r.key == key).map(|r| r.text.as_str())
    }

    /// "subject predicate object" rendering of a triple from the declared
    /// texts, as sent to the verifier.
    pub fn triple_text(&self, triple: &TripleRef) -> Option<String> {
        Some(format!(
            "{} {} {}",
            self.entity_text(&triple.subject)?,
            self.relation_text(&triple.rel)?,
            self.entity_text(&triple.object)?
        ))
    }

    /// Distinct triples across all frames, in first-appearance order.
    pub fn distinct_triples(&self) -> Vec<&TripleRef> {
        let mut seen = HashSet::new();
        self.frames
            .iter()
            .flat_map(|f| f.triples.iter())
            .filter(|t| seen.insert(*t))
            .collect()
    }

    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(self).expect("query spec serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("duplicate {kind} key {key:?}")]
    DuplicateKey { kind: &'static str, key: String },
    #[error("frame {frame}: undeclared {kind} key {key:?}")]
    UndeclaredKey { frame: usize, kind: &'static str, key: String },
    #[error("query declares no frames")]
    EmptyFrames,
    #[error("empty frame spec at frame {frame}")]
    EmptyFrameSpec { frame: usize },
    #[error("frame at position {position} carries index {index}")]
    FrameIndex { position: usize, index: usize },
}

/// Parses a query document. Structural errors (syntax, undeclared or
/// duplicate keys, empty frames) are rejected here; semantic checks live in
/// [`validate_query`](super::validate_query).
pub fn parse_query(doc: &str) -> Result<QuerySpec, ParseError> {
    let spec: QuerySpec = serde_json::from_str(doc).map_err(|e| ParseError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;

    let mut entity_keys = HashSet::new();
    for e in &spec.entities {
        if !entity_keys.insert(e.key.as_str()) {
            return Err(ParseError::DuplicateKey { kind: "entity", key: e.key.clone() });
        }
    }
    let mut rel_keys = HashSet::new();
    for r in &spec.relationships {
        if !rel_keys.insert(r.key.as_str()) {
            return Err(ParseError::DuplicateKey { kind: "relationship", key: r.key.clone() });
        }
    }
    if spec.frames.is_empty() {
        return Err(ParseError::EmptyFrames);
    }
    for (position, frame) in spec.frames.iter().enumerate() {
        if frame.index != position {
            return Err(ParseError::FrameIndex { position, index: frame.index });
        }
        if frame.triples.is_empty() {
            return Err(ParseError::EmptyFrameSpec { frame: position });
        }
        for t in &frame.triples {
            for (kind, key, declared) in [
                ("entity", &t.subject, &entity_keys),
                ("relationship", &t.rel, &rel_keys),
                ("entity", &t.object, &entity_keys),
            ] {
                if !declared.contains(key.as_str()) {
                    return Err(ParseError::UndeclaredKey { frame: position, kind, key: key.clone() });
                }
            }
        }
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::BACKPACK_BICYCLE_QUERY;

    #[test]
    fn parses_backpack_bicycle_query() {
        let q = parse_query(BACKPACK_BICYCLE_QUERY).unwrap();
        assert_eq!(q.entities.len(), 3);
        assert_eq!(q.relationships.len(), 3);
        assert_eq!(q.frames.len(), 2);
        assert_eq!(q.temporal.len(), 1);
        assert_eq!(q.entities[2].text, "man in red");
        assert_eq!(q.frames[0].triples[1], TripleRef::new("e3", "r2", "e2"));
        assert_eq!(
            q.temporal[0],
            TemporalConstraint { later: 1, earlier: 0, op: TemporalOp::Gt, bound: 4 }
        );
        assert_eq!(q.distinct_triples().len(), 3);
        assert_eq!(
            q.triple_text(&q.frames[1].triples[1]).unwrap(),
            "man in red rightOf bicycle"
        );
    }

    #[test]
    fn empty_frame_spec_rejected() {
        let doc = r#"{"entities": [{"key": "e1", "text": "dog"}], "relationships": [],
                      "frames": [{"index": 0, "triples": []}]}"#;
        let err = parse_query(doc).unwrap_err();
        assert_eq!(err, ParseError::EmptyFrameSpec { frame: 0 });
        assert!(err.to_string().contains("empty frame spec"));
    }

    #[test]
    fn structural_errors() {
        let no_frames = r#"{"entities": [], "relationships": [], "frames": []}"#;
        assert_eq!(parse_query(no_frames), Err(ParseError::EmptyFrames));

        let dup = r#"{"entities": [{"key": "a", "text": "x"}, {"key": "a", "text": "y"}],
                      "relationships": [], "frames": []}"#;
        assert!(matches!(parse_query(dup), Err(ParseError::DuplicateKey { kind: "entity", .. })));

        let undeclared = r#"{"entities": [{"key": "a", "text": "x"}],
                             "relationships": [{"key": "r", "text": "near"}],
                             "frames": [{"index": 0, "triples": [["a", "r", "b"]]}]}"#;
        assert_eq!(
            parse_query(undeclared),
            Err(ParseError::UndeclaredKey { frame: 0, kind: "entity", key: "b".into() })
        );

        let misnumbered = r#"{"entities": [{"key": "a", "text": "x"}, {"key": "b", "text": "y"}],
                              "relationships": [{"key": "r", "text": "near"}],
                              "frames": [{"index": 1, "triples": [["a", "r", "b"]]}]}"#;
        assert_eq!(parse_query(misnumbered), Err(ParseError::FrameIndex { position: 0, index: 1 }));
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = parse_query("{\n  \"entities\": [,\n}").unwrap_err();
        match err {
            ParseError::Syntax { line, column, .. } => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            other => panic!("expected syntax error, got {other:?}"),
        }
        assert!(matches!(
            parse_query(r#"{"entities": [], "relationships": [], "frames": [], "extra": 1}"#),
            Err(ParseError::Syntax { .. })
        ));
        assert!(matches!(
            parse_query(r#"{"entities": [], "relationships": [], "frames": [], "temporal": [{"later": 1, "earlier": 0, "op": "!=", "bound": 1}]}"#),
            Err(ParseError::Syntax { .. })
        ));
    }

    #[test]
    fn serialized_form_is_stable() {
        let q = parse_query(BACKPACK_BICYCLE_QUERY).unwrap();
        let doc = q.to_document();
        assert!(doc.contains(r#""op": ">""#));
        assert!(doc.contains(r#"["#));
        assert_eq!(parse_query(&doc).unwrap(), q);
    }

    #[test]
    fn constraint_intervals() {
        let c = |op, bound| TemporalConstraint { later: 1, earlier: 0, op, bound };
        assert_eq!(c(TemporalOp::Gt, 4).difference_interval(), (5, i64::MAX));
        assert_eq!(c(TemporalOp::Ge, 4).difference_interval(), (4, i64::MAX));
        assert_eq!(c(TemporalOp::Lt, 4).difference_interval(), (i64::MIN, 3));
        assert_eq!(c(TemporalOp::Le, 4).difference_interval(), (i64::MIN, 4));
        assert_eq!(c(TemporalOp::Eq, 4).difference_interval(), (4, 4));
        assert!(c(TemporalOp::Gt, 4).holds(16, 10));
        assert!(!c(TemporalOp::Gt, 4).holds(13, 10));
    }
}
