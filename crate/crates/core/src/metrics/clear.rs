//! Per-frame matching and CLEAR-MOT counts.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::TrackBox;
use crate::assigner::{hungarian, CostMatrix};
use crate::simworld::GroundTruthFrame;
use crate::{Error, Result};

/// Cost standing in for a pair beyond the gate; large enough that the
/// solver prefers any number of gated pairs over a single one of these.
const FORBIDDEN: f64 = 1e6;

/// Matches of one class on one frame. Indices point into the frame's
/// target list and into the prediction slice handed to [`match_frames`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameMatching {
    /// `(gt index, prediction index, distance)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub false_positives: Vec<usize>,
    pub misses: Vec<usize>,
    /// Matched gt indices whose identity changed prediction id here.
    pub switches: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MotCounts {
    pub gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub ids: usize,
    /// Sum of matched center distances.
    pub dist_sum: f64,
}

impl MotCounts {
    /// `1 - (FP + FN + IDS) / GT`; 0 with no ground truth.
    pub fn mota(&self) -> f64 {
        if self.gt == 0 {
            return 0.0;
        }
        1.0 - (self.fp + self.fn_ + self.ids) as f64 / self.gt as f64
    }

    /// Mean matched distance; 0 without matches.
    pub fn motp(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.dist_sum / self.tp as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.gt == 0 {
            0.0
        } else {
            self.tp as f64 / self.gt as f64
        }
    }

    pub fn add(&mut self, o: &MotCounts) {
        self.gt += o.gt;
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.ids += o.ids;
        self.dist_sum += o.dist_sum;
    }
}

fn bev_distance(a: [f64; 3], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Prediction indices grouped by frame; errors unless frame indices are
/// sorted and in range.
pub(crate) fn by_frame(num_frames: usize, preds: &[TrackBox]) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); num_frames];
    let mut last = 0;
    for (i, p) in preds.iter().enumerate() {
        if p.t < last {
            return Err(Error::contract("predictions must be sorted by frame"));
        }
        if p.t >= num_frames {
            return Err(Error::contract(format!("prediction on frame {} of {num_frames}", p.t)));
        }
        last = p.t;
        out[p.t].push(i);
    }
    Ok(out)
}

/// Frame-by-frame matching of one class. Pairs that kept their previous
/// identity and are still within `d_match` are taken first; the rest are
/// matched by minimum total distance under the gate.
pub fn match_frames(
    frames: &[GroundTruthFrame],
    preds: &[TrackBox],
    class: usize,
    d_match: f64,
) -> Result<Vec<FrameMatching>> {
    let per_frame = by_frame(frames.len(), preds)?;
    let mut last: HashMap<u64, u64> = HashMap::new();
    let mut out = Vec::with_capacity(frames.len());
    for (frame, idx) in frames.iter().zip(&per_frame) {
        let gts: Vec<usize> = (0..frame.targets.len()).filter(|&i| frame.targets[i].class_id == class).collect();
        let ps: Vec<usize> = idx.iter().copied().filter(|&j| preds[j].class == class).collect();
        let dist = |g: usize, p: usize| bev_distance(frame.targets[g].center, preds[p].center);

        let mut pairs = Vec::new();
        let mut used_g = BTreeSet::new();
        let mut used_p = BTreeSet::new();
        for &g in &gts {
            let Some(&pid) = last.get(&frame.targets[g].id) else { continue };
            let keep = ps
                .iter()
                .copied()
                .filter(|p| !used_p.contains(p) && preds[*p].id == pid)
                .find(|&p| dist(g, p) <= d_match);
            if let Some(p) = keep {
                pairs.push((g, p, dist(g, p)));
                used_g.insert(g);
                used_p.insert(p);
            }
        }
        let rest_g: Vec<usize> = gts.iter().copied().filter(|g| !used_g.contains(g)).collect();
        let rest_p: Vec<usize> = ps.iter().copied().filter(|p| !used_p.contains(p)).collect();
        if !rest_g.is_empty() && !rest_p.is_empty() {
            let data = rest_g
                .iter()
                .flat_map(|&g| {
                    rest_p.iter().map(move |&p| (g, p)).collect::<Vec<_>>()
                })
                .map(|(g, p)| {
                    let d = dist(g, p);
                    if d <= d_match { d } else { FORBIDDEN }
                })
                .collect();
            let cost = CostMatrix::new(rest_g.len(), rest_p.len(), data)?;
            for &(r, c) in &hungarian(&cost).pairs {
                let (g, p) = (rest_g[r], rest_p[c]);
                let d = dist(g, p);
                if d <= d_match {
                    pairs.push((g, p, d));
                    used_g.insert(g);
                    used_p.insert(p);
                }
            }
        }
        pairs.sort_by_key(|p| p.0);
        let mut switches = Vec::new();
        for &(g, p, _) in &pairs {
            let gid = frame.targets[g].id;
            if let Some(prev) = last.insert(gid, preds[p].id) {
                if prev != preds[p].id {
                    switches.push(g);
                }
            }
        }
        out.push(FrameMatching {
            pairs,
            false_positives: ps.into_iter().filter(|p| !used_p.contains(p)).collect(),
            misses: gts.into_iter().filter(|g| !used_g.contains(g)).collect(),
            switches,
        });
    }
    Ok(out)
}

pub fn counts(matching: &[FrameMatching]) -> MotCounts {
    let mut c = MotCounts::default();
    for m in matching {
        c.tp += m.pairs.len();
        c.fp += m.false_positives.len();
        c.fn_ += m.misses.len();
        c.gt += m.pairs.len() + m.misses.len();
        c.ids += m.switches.len();
        c.dist_sum += m.pairs.iter().map(|p| p.2).sum::<f64>();
    }
    c
}

/// Classes present among ground truths or predictions.
pub fn classes(frames: &[GroundTruthFrame], preds: &[TrackBox]) -> BTreeSet<usize> {
    frames
        .iter()
        .flat_map(|f| f.targets.iter().map(|t| t.class_id))
        .chain(preds.iter().map(|p| p.class))
        .collect()
}

/// CLEAR-MOT counts per class for one scene.
pub fn clear_mot(frames: &[GroundTruthFrame], preds: &[TrackBox], d_match: f64) -> Result<BTreeMap<usize, MotCounts>> {
    classes(frames, preds)
        .into_iter()
        .map(|c| Ok((c, counts(&match_frames(frames, preds, c, d_match)?))))
        .collect()
}
