//! Temporal matching: one frame binding per query frame, within a segment.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conjoin::FrameBinding;
use crate::model::{DifferenceBounds, EntityId, FrameId, SegmentId, TemporalConstraint};

/// A satisfying assignment before scoring. `picks[p]` indexes the chosen
/// binding in `per_frame[p]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalMatch {
    pub vid: SegmentId,
    pub frame_assignment: Vec<FrameId>,
    pub entity_bindings: BTreeMap<String, EntityId>,
    pub picks: Vec<usize>,
}

struct Search<'a> {
    per_frame: &'a [Vec<FrameBinding>],
    /// Per position, binding indices of this segment sorted by fid.
    lists: &'a [Vec<usize>],
    bounds: &'a DifferenceBounds,
    constraints: &'a [TemporalConstraint],
    vid: &'a str,
    picks: Vec<usize>,
    fids: Vec<i64>,
    bindings: BTreeMap<String, EntityId>,
    out: Vec<TemporalMatch>,
}

impl Search<'_> {
    fn run(&mut self, pos: usize) {
        let n = self.per_frame.len();
        if pos == n {
            self.out.push(TemporalMatch {
                vid: self.vid.to_owned(),
                frame_assignment: self.fids.iter().map(|f| *f as FrameId).collect(),
                entity_bindings: self.bindings.clone(),
                picks: self.picks.clone(),
            });
            return;
        }
        let (mut lo, mut hi) = (0i64, i64::MAX);
        for (anchor, fid) in self.fids.iter().enumerate() {
            let (l, h) = self.bounds.window(anchor, *fid, pos);
            lo = lo.max(l);
            hi = hi.min(h);
        }
        if lo > hi {
            return;
        }
        let list = self.lists[pos].as_slice();
        let fid_of = |i: usize| i64::from(self.per_frame[pos][list[i]].fid);
        let start = list.partition_point(|&b| i64::from(self.per_frame[pos][b].fid) < lo);
        let mut i = start;
        while i < list.len() && fid_of(i) <= hi {
            let idx = list[i];
            i += 1;
            let fb = &self.per_frame[pos][idx];
            let fid = i64::from(fb.fid);
            let earlier_ok = self.constraints.iter().all(|c| {
                let get = |p: usize| if p == pos { Some(fid) } else { self.fids.get(p).copied() };
                match (get(c.later), get(c.earlier)) {
                    (Some(l), Some(e)) if c.later == pos || c.earlier == pos => c.op.holds(l - e, c.bound),
                    _ => true,
                }
            });
            if !earlier_ok || self.fids.last().is_some_and(|prev| fid <= *prev) {
                continue;
            }
            let mut added = Vec::new();
            let mut consistent = true;
            for (k, e) in &fb.entity_bindings {
                match self.bindings.get(k) {
                    Some(b) if b != e => {
                        consistent = false;
                        break;
                    }
                    Some(_) => {}
                    None => {
                        self.bindings.insert(k.clone(), *e);
                        added.push(k.clone());
                    }
                }
            }
            if consistent {
                self.picks.push(idx);
                self.fids.push(fid);
                self.run(pos + 1);
                self.fids.pop();
                self.picks.pop();
            }
            for k in added {
                self.bindings.remove(&k);
            }
        }
    }
}

/// Enumerates, per segment, every choice of one binding per query frame
/// with globally consistent entity bindings, strictly increasing frame ids
/// and all constraints satisfied. Candidates are pruned to the window
/// implied by already-chosen frames. Segments are searched in parallel on
/// the current rayon pool; output is sorted by `(vid, frame_assignment,
/// entity_bindings)`.
pub fn match_temporal(per_frame: &[Vec<FrameBinding>], constraints: &[TemporalConstraint]) -> Vec<TemporalMatch> {
    let n = per_frame.len();
    if n == 0 || constraints.iter().any(|c| c.later >= n || c.earlier >= n) {
        return Vec::new();
    }
    let Some(bounds) = DifferenceBounds::new(n, constraints) else { return Vec::new() };

    let mut by_vid: BTreeMap<&str, Vec<Vec<usize>>> = BTreeMap::new();
    for (pos, list) in per_frame.iter().enumerate() {
        for (i, fb) in list.iter().enumerate() {
            by_vid.entry(fb.vid.as_str()).or_insert_with(|| vec![Vec::new(); n])[pos].push(i);
        }
    }
    let work: Vec<(&str, Vec<Vec<usize>>)> = by_vid.into_iter().filter(|(_, l)| l.iter().all(|x| !x.is_empty())).collect();

    let mut out: Vec<TemporalMatch> = work
        .into_par_iter()
        .flat_map_iter(|(vid, mut lists)| {
            for (pos, l) in lists.iter_mut().enumerate() {
                l.sort_by_key(|&i| (per_frame[pos][i].fid, i));
            }
            let mut s = Search {
                per_frame,
                lists: &lists,
                bounds: &bounds,
                constraints,
                vid,
                picks: Vec::with_capacity(n),
                fids: Vec::with_capacity(n),
                bindings: BTreeMap::new(),
                out: Vec::new(),
            };
            s.run(0);
            s.out
        })
        .collect();
    out.sort_by(|a, b| (&a.vid, &a.frame_assignment, &a.entity_bindings).cmp(&(&b.vid, &b.frame_assignment, &b.entity_bindings)));
    out
}
