use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use super::query::{QuerySpec, TemporalConstraint};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    DuplicateEntityKey { key: String },
    DuplicateRelationKey { key: String },
    NoFrames,
    EmptyFrameSpec { frame: usize },
    FrameIndexMismatch { position: usize, index: usize },
    UnknownEntityKey { frame: usize, key: String },
    UnknownRelationKey { frame: usize, key: String },
    SubjectEqualsObject { frame: usize, key: String },
    ConstraintIndexOutOfRange { constraint: usize },
    ConstraintSelfReference { constraint: usize },
    UnsatisfiableConstraints { constraints: Vec<usize> },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::DuplicateEntityKey { key } => write!(f, "duplicate entity key {key:?}"),
            Finding::DuplicateRelationKey { key } => write!(f, "duplicate relationship key {key:?}"),
            Finding::NoFrames => write!(f, "query declares no frames"),
            Finding::EmptyFrameSpec { frame } => write!(f, "empty frame spec at frame {frame}"),
            Finding::FrameIndexMismatch { position, index } => {
                write!(f, "frame at position {position} carries index {index}")
            }
            Finding::UnknownEntityKey { frame, key } => {
                write!(f, "frame {frame}: unknown entity key {key:?}")
            }
            Finding::UnknownRelationKey { frame, key } => {
                write!(f, "frame {frame}: unknown relationship key {key:?}")
            }
            Finding::SubjectEqualsObject { frame, key } => {
                write!(f, "frame {frame}: subject equals object ({key:?})")
            }
            Finding::ConstraintIndexOutOfRange { constraint } => {
                write!(f, "temporal constraint {constraint}: frame index out of range")
            }
            Finding::ConstraintSelfReference { constraint } => {
                write!(f, "temporal constraint {constraint}: later and earlier frame coincide")
            }
            Finding::UnsatisfiableConstraints { constraints } => {
                write!(f, "unsatisfiable constraint set {constraints:?}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, finding) in self.findings.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{finding}")?;
        }
        Ok(())
    }
}

/// Reports every invariant violation in `q`. Empty iff the query is valid.
pub fn validate_query(q: &QuerySpec) -> ValidationReport {
    let mut findings = Vec::new();

    let mut entity_keys = HashSet::new();
    for e in &q.entities {
        if !entity_keys.insert(e.key.as_str()) {
            findings.push(Finding::DuplicateEntityKey { key: e.key.clone() });
        }
    }
    let mut rel_keys = HashSet::new();
    for r in &q.relationships {
        if !rel_keys.insert(r.key.as_str()) {
            findings.push(Finding::DuplicateRelationKey { key: r.key.clone() });
        }
    }

    if q.frames.is_empty() {
        findings.push(Finding::NoFrames);
    }
    for (position, frame) in q.frames.iter().enumerate() {
        if frame.index != position {
            findings.push(Finding::FrameIndexMismatch { position, index: frame.index });
        }
        if frame.triples.is_empty() {
            findings.push(Finding::EmptyFrameSpec { frame: position });
        }
        for t in &frame.triples {
            for key in [&t.subject, &t.object] {
                if !entity_keys.contains(key.as_str()) {
                    findings.push(Finding::UnknownEntityKey { frame: position, key: key.clone() });
                }
            }
            if !rel_keys.contains(t.rel.as_str()) {
                findings.push(Finding::UnknownRelationKey { frame: position, key: t.rel.clone() });
            }
            if t.subject == t.object {
                findings.push(Finding::SubjectEqualsObject { frame: position, key: t.subject.clone() });
            }
        }
    }

    let n = q.frames.len();
    let mut usable = Vec::new();
    for (i, c) in q.temporal.iter().enumerate() {
        if c.later >= n || c.earlier >= n {
            findings.push(Finding::ConstraintIndexOutOfRange { constraint: i });
        } else if c.later == c.earlier {
            findings.push(Finding::ConstraintSelfReference { constraint: i });
        } else {
            usable.push(i);
        }
    }
    if n > 0 {
        let constraints: Vec<TemporalConstraint> = usable.iter().map(|&i| q.temporal[i]).collect();
        if DifferenceBounds::new(n, &constraints).is_none() {
            findings.push(Finding::UnsatisfiableConstraints { constraints: usable });
        }
    }

    ValidationReport { findings }
}

/// Tightest implied bounds on frame-id differences.
///
/// Built from the explicit constraints plus the implicit ordering
/// `f[i+1] - f[i] >= 1`, closed under shortest paths. `upper(i, j)` is the
/// largest admissible value of `f[j] - f[i]` (`None` when unbounded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DifferenceBounds {
    n: usize,
    upper: Vec<Option<i64>>,
}

impl DifferenceBounds {
    /// Returns `None` when the constraint set admits no assignment. Indices
    /// must be in range.
    pub fn new(n: usize, constraints: &[TemporalConstraint]) -> Option<Self> {
        let mut upper = vec![None; n * n];
        let tighten = |upper: &mut Vec<Option<i64>>, from: usize, to: usize, bound: i64| {
            let slot = &mut upper[from * n + to];
            *slot = Some(slot.map_or(bound, |b| b.min(bound)));
        };
        for i in 0..n {
            upper[i * n + i] = Some(0);
        }
        for i in 1..n {
            // f[i-1] - f[i] <= -1
            tighten(&mut upper, i, i - 1, -1);
        }
        for c in constraints {
            let (lo, hi) = c.difference_interval();
            if hi != i64::MAX {
                tighten(&mut upper, c.earlier, c.later, hi);
            }
            if lo != i64::MIN {
                tighten(&mut upper, c.later, c.earlier, lo.saturating_neg());
            }
        }
        for k in 0..n {
            for i in 0..n {
                let Some(ik) = upper[i * n + k] else { continue };
                for j in 0..n {
                    if let Some(kj) = upper[k * n + j] {
                        tighten(&mut upper, i, j, ik.saturating_add(kj));
                    }
                }
            }
        }
        let consistent = (0..n).all(|i| upper[i * n + i].is_some_and(|d| d >= 0));
        consistent.then_some(Self { n, upper })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Largest admissible `f[to] - f[from]`.
    pub fn upper(&self, from: usize, to: usize) -> Option<i64> {
        self.upper[from * self.n + to]
    }

    /// Inclusive range of admissible frame ids for position `target` given
    /// the frame already chosen at position `anchor`.
    pub fn window(&self, anchor: usize, anchor_fid: i64, target: usize) -> (i64, i64) {
        let hi = self.upper(anchor, target).map_or(i64::MAX, |d| anchor_fid.saturating_add(d));
        let lo = self.upper(target, anchor).map_or(i64::MIN, |d| anchor_fid.saturating_sub(d));
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_query, EntityDecl, FrameSpec, RelationDecl, TemporalOp, TripleRef};

    fn tc(later: usize, earlier: usize, op: TemporalOp, bound: i64) -> TemporalConstraint {
        TemporalConstraint { later, earlier, op, bound }
    }

    fn two_frame_query(temporal: Vec<TemporalConstraint>) -> QuerySpec {
        QuerySpec {
            entities: vec![
                EntityDecl { key: "e1".into(), text: "man".into() },
                EntityDecl { key: "e2".into(), text: "bicycle".into() },
            ],
            relationships: vec![RelationDecl { key: "r1".into(), text: "near".into() }],
            frames: vec![
                FrameSpec { index: 0, triples: vec![TripleRef::new("e1", "r1", "e2")] },
                FrameSpec { index: 1, triples: vec![TripleRef::new("e1", "r1", "e2")] },
            ],
            temporal,
        }
    }

    /// Pairwise interval intersection including the implicit `d >= 1`
    /// ordering for adjacent frames. Independent of the shortest-path closure.
    fn pairwise_satisfiable(constraints: &[TemporalConstraint]) -> bool {
        let mut lo = 1i64;
        let mut hi = i64::MAX;
        for c in constraints {
            let (clo, chi) = c.difference_interval();
            let (clo, chi) = if c.later == 1 { (clo, chi) } else { (chi.saturating_neg(), clo.saturating_neg()) };
            lo = lo.max(clo);
            hi = hi.min(chi);
        }
        lo <= hi
    }

    #[test]
    fn backpack_bicycle_query_is_valid() {
        let q = parse_query(crate::synth::BACKPACK_BICYCLE_QUERY).unwrap();
        assert!(validate_query(&q).is_valid());
    }

    #[test]
    fn subject_equals_object() {
        let mut q = two_frame_query(vec![]);
        q.frames[0].triples[0] = TripleRef::new("e1", "r1", "e1");
        let report = validate_query(&q);
        assert_eq!(report.findings, vec![Finding::SubjectEqualsObject { frame: 0, key: "e1".into() }]);
        assert!(report.to_string().contains("subject equals object"));
    }

    #[test]
    fn contradictory_pair_is_unsatisfiable() {
        let q = two_frame_query(vec![tc(1, 0, TemporalOp::Gt, 4), tc(1, 0, TemporalOp::Le, 3)]);
        let report = validate_query(&q);
        assert_eq!(report.findings, vec![Finding::UnsatisfiableConstraints { constraints: vec![0, 1] }]);
        assert!(report.to_string().contains("unsatisfiable constraint set"));

        let q = two_frame_query(vec![tc(1, 0, TemporalOp::Gt, 4), tc(1, 0, TemporalOp::Lt, 2)]);
        assert!(!validate_query(&q).is_valid());
    }

    #[test]
    fn reversed_constraint_conflicts_with_ordering() {
        // f0 - f1 >= 0 contradicts the sequence order f1 > f0.
        let q = two_frame_query(vec![tc(0, 1, TemporalOp::Ge, 0)]);
        assert!(!validate_query(&q).is_valid());
        // f0 - f1 <= -3 is the same as f1 - f0 >= 3.
        let q = two_frame_query(vec![tc(0, 1, TemporalOp::Le, -3)]);
        assert!(validate_query(&q).is_valid());
    }

    #[test]
    fn closure_agrees_with_interval_intersection() {
        let ops = [TemporalOp::Lt, TemporalOp::Le, TemporalOp::Gt, TemporalOp::Ge, TemporalOp::Eq];
        let mut checked = 0;
        for &op_a in &ops {
            for &op_b in &ops {
                for a in -3..=6 {
                    for b in -3..=6 {
                        for flip in [false, true] {
                            let second = if flip { tc(0, 1, op_b, b) } else { tc(1, 0, op_b, b) };
                            let cs = [tc(1, 0, op_a, a), second];
                            assert_eq!(
                                DifferenceBounds::new(2, &cs).is_some(),
                                pairwise_satisfiable(&cs),
                                "{cs:?}"
                            );
                            checked += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(checked, 5 * 5 * 10 * 10 * 2);
    }

    #[test]
    fn transitive_infeasibility_detected() {
        let cs = [
            tc(1, 0, TemporalOp::Gt, 10),
            tc(2, 1, TemporalOp::Gt, 10),
            tc(2, 0, TemporalOp::Lt, 5),
        ];
        assert!(DifferenceBounds::new(3, &cs).is_none());
        let bounds = DifferenceBounds::new(3, &cs[..2]).unwrap();
        assert_eq!(bounds.upper(2, 0), Some(-22));
        assert_eq!(bounds.upper(0, 2), None);
        assert_eq!(bounds.window(0, 100, 2), (122, i64::MAX));
    }

    #[test]
    fn index_and_key_findings() {
        let mut q = two_frame_query(vec![tc(2, 0, TemporalOp::Gt, 1), tc(1, 1, TemporalOp::Gt, 1)]);
        q.frames[1].triples.push(TripleRef::new("zz", "rr", "e2"));
        q.entities.push(EntityDecl { key: "e1".into(), text: "again".into() });
        let report = validate_query(&q);
        assert!(report.findings.contains(&Finding::ConstraintIndexOutOfRange { constraint: 0 }));
        assert!(report.findings.contains(&Finding::ConstraintSelfReference { constraint: 1 }));
        assert!(report.findings.contains(&Finding::UnknownEntityKey { frame: 1, key: "zz".into() }));
        assert!(report.findings.contains(&Finding::UnknownRelationKey { frame: 1, key: "rr".into() }));
        assert!(report.findings.contains(&Finding::DuplicateEntityKey { key: "e1".into() }));
    }
}
