//! Focal classification and L1 box losses, per-layer frame losses and the
//! weighted clip total.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::assigner::{gt_box, AssignmentResult, FOCAL_ALPHA, FOCAL_GAMMA};
use crate::association::{asso_loss, AffinityMatrix, AssoTarget};
use crate::decoder::{BoxCoder, Box3D, ClassScores, DecoderOutput, Prediction, BOX_CODE_LEN};
use crate::numcore::{Graph, Tensor, Var};
use crate::simworld::GroundTruthTarget;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub det: f64,
    pub track: f64,
    pub asso: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            det: 1.0,
            track: 1.0,
            asso: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.det, self.track, self.asso].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Binary-per-class focal loss on probabilities. `None` makes every class
/// a negative.
pub fn focal_loss(p: &ClassScores, target: Option<usize>, alpha: f64, gamma: f64) -> Result<f64> {
    if p.0.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
        return Err(Error::contract("focal loss needs probabilities in (0, 1)"));
    }
    if target.is_some_and(|t| t >= p.0.len()) {
        return Err(Error::contract("target class out of range"));
    }
    Ok(p.0
        .iter()
        .enumerate()
        .map(|(c, &x)| {
            if Some(c) == target {
                -alpha * (1.0 - x).powf(gamma) * x.ln()
            } else {
                -(1.0 - alpha) * x.powf(gamma) * (1.0 - x).ln()
            }
        })
        .sum())
}

/// Weighted L1 between a predicted box and a ground truth in normalised units.
pub fn box_l1(pred: &Box3D, gt: &GroundTruthTarget, coder: &BoxCoder) -> f64 {
    let a = coder.encode(pred);
    let b = coder.encode(&gt_box(gt));
    a.iter().zip(&b).zip(&coder.weights).map(|((x, y), w)| w * (x - y).abs()).sum()
}

/// Loss of one query group under one assignment: focal over the supervised
/// rows plus L1 over matched rows, divided by `max(1, matches)`.
///
/// Query indices in `assign` are relative to `rows`. With
/// `negatives = true` unmatched rows are supervised as background, otherwise
/// they are skipped.
pub fn group_loss(
    g: &mut Graph,
    pred: &Prediction,
    rows: Range<usize>,
    assign: &AssignmentResult,
    gts: &[GroundTruthTarget],
    negatives: bool,
    coder: &BoxCoder,
) -> Result<Var> {
    let n = rows.len();
    let total = pred.num_queries(g);
    if rows.end > total {
        return Err(Error::contract(format!("rows {rows:?} beyond {total} predictions")));
    }
    let nc = g.shape(pred.logits)[1];
    for &(i, j) in &assign.pairs {
        if j >= n || i >= gts.len() {
            return Err(Error::contract(format!("assignment ({i}, {j}) out of range")));
        }
        if gts[i].class_id >= nc {
            return Err(Error::contract("gt class out of range"));
        }
    }
    let matched = assign.pairs.len();
    let cls_rows: Vec<usize> = if negatives {
        rows.clone().collect()
    } else {
        assign.pairs.iter().map(|p| rows.start + p.1).collect()
    };
    if cls_rows.is_empty() {
        return g.add_all(&[]);
    }
    let mut targets = vec![0.0; cls_rows.len() * nc];
    for (k, &(i, j)) in assign.pairs.iter().enumerate() {
        let r = if negatives { j } else { k };
        targets[r * nc + gts[i].class_id] = 1.0;
    }
    let logits = g.gather_rows(pred.logits, &cls_rows)?;
    let focal = g.focal(logits, targets, FOCAL_ALPHA, FOCAL_GAMMA)?;
    let mut terms = vec![g.sum(focal)?];
    if matched > 0 {
        let box_rows: Vec<usize> = assign.pairs.iter().map(|p| rows.start + p.1).collect();
        let codes = g.gather_rows(pred.box_code, &box_rows)?;
        let gt_codes: Vec<f64> = assign.pairs.iter().flat_map(|p| coder.encode(&gt_box(&gts[p.0]))).collect();
        let gt_codes = g.constant(Tensor::new(vec![matched, BOX_CODE_LEN], gt_codes)?);
        let diff = g.sub(codes, gt_codes)?;
        let diff = g.abs(diff)?;
        let w = g.constant(Tensor::vector(coder.weights.to_vec())?);
        let weighted = g.mul_row(diff, w)?;
        terms.push(g.sum(weighted)?);
    }
    let sum = g.add_all(&terms)?;
    g.scale(sum, 1.0 / matched.max(1) as f64)
}

/// Per-frame loss components. Generic so the same layout carries graph
/// nodes and plain values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameTerms<T> {
    pub det_s: T,
    pub det_u: T,
    pub track_s: T,
    pub track_u: T,
    pub asso: T,
}

impl<T: Copy> FrameTerms<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> FrameTerms<U> {
        FrameTerms {
            det_s: f(self.det_s),
            det_u: f(self.det_u),
            track_s: f(self.track_s),
            track_u: f(self.track_u),
            asso: f(self.asso),
        }
    }

    pub fn named(&self) -> [(&'static str, T); 5] {
        [
            ("det_s", self.det_s),
            ("det_u", self.det_u),
            ("track_s", self.track_s),
            ("track_u", self.track_u),
            ("asso", self.asso),
        ]
    }
}

/// Assignments of one decoder layer.
#[derive(Clone, Debug, Default)]
pub struct LayerAssignments {
    /// Standard-decoder object queries against `FrameSupervision::s_object_gts`.
    pub s_objects: AssignmentResult,
    /// Twin-decoder object queries against `FrameSupervision::u_object_gts`.
    pub u_objects: Option<AssignmentResult>,
    /// Association targets for this layer's affinity matrix.
    pub asso: Option<AssoTarget>,
}

/// Everything needed to supervise one frame.
#[derive(Clone, Debug, Default)]
pub struct FrameSupervision {
    /// Ground truths reachable by track queries (identity matching).
    pub track_gts: Vec<GroundTruthTarget>,
    /// Track query index -> ground truth, shared by every layer.
    pub tracks: AssignmentResult,
    pub s_object_gts: Vec<GroundTruthTarget>,
    pub u_object_gts: Vec<GroundTruthTarget>,
    /// Supervise twin-decoder track queries one-to-one.
    pub supervise_u_tracks: bool,
    /// Track queries whose target is gone are classified as background
    /// instead of being skipped.
    pub track_negatives: bool,
    pub layers: Vec<LayerAssignments>,
}

/// Sums every loss component over decoder layers. Unmatched object
/// queries are background; unmatched track queries are background when
/// `track_negatives` is set and skipped otherwise. Components without inputs are zero constants.
pub fn frame_losses(
    g: &mut Graph,
    s_out: &DecoderOutput,
    u_out: Option<&DecoderOutput>,
    affinities: &[AffinityMatrix],
    num_tracks: usize,
    sup: &FrameSupervision,
    coder: &BoxCoder,
) -> Result<FrameTerms<Var>> {
    let layers = s_out.layers.len();
    if sup.layers.len() != layers {
        return Err(Error::contract(format!(
            "{} layer assignments for {layers} layers",
            sup.layers.len()
        )));
    }
    if let Some(u) = u_out {
        if u.layers.len() != layers {
            return Err(Error::contract("decoders disagree on layer count"));
        }
    }
    let mut det_s = Vec::new();
    let mut det_u = Vec::new();
    let mut track_s = Vec::new();
    let mut track_u = Vec::new();
    let mut asso = Vec::new();
    for (l, la) in sup.layers.iter().enumerate() {
        let sp = &s_out.layers[l].prediction;
        let n = sp.num_queries(g);
        if num_tracks > n {
            return Err(Error::contract("more tracks than queries"));
        }
        let objects = num_tracks..n;
        det_s.push(group_loss(g, sp, objects.clone(), &la.s_objects, &sup.s_object_gts, true, coder)?);
        if num_tracks > 0 {
            track_s.push(group_loss(g, sp, 0..num_tracks, &sup.tracks, &sup.track_gts, sup.track_negatives, coder)?);
        }
        if let Some(u) = u_out {
            let up = &u.layers[l].prediction;
            if let Some(ua) = &la.u_objects {
                det_u.push(group_loss(g, up, objects.clone(), ua, &sup.u_object_gts, true, coder)?);
            }
            if num_tracks > 0 && sup.supervise_u_tracks {
                track_u.push(group_loss(g, up, 0..num_tracks, &sup.tracks, &sup.track_gts, sup.track_negatives, coder)?);
            }
        }
        if let Some(target) = &la.asso {
            let aff = affinities
                .get(l)
                .ok_or_else(|| Error::contract("association target without affinity"))?;
            asso.push(asso_loss(g, aff, target)?);
        }
    }
    Ok(FrameTerms {
        det_s: g.add_all(&det_s)?,
        det_u: g.add_all(&det_u)?,
        track_s: g.add_all(&track_s)?,
        track_u: g.add_all(&track_u)?,
        asso: g.add_all(&asso)?,
    })
}

/// Weighted clip total on the graph. The first frame contributes detection
/// terms only.
pub fn clip_total(g: &mut Graph, frames: &[FrameTerms<Var>], w: &LossWeights) -> Result<Var> {
    let mut parts = Vec::new();
    for (t, f) in frames.iter().enumerate() {
        let d = g.add(f.det_s, f.det_u)?;
        parts.push(g.scale(d, w.det)?);
        if t > 0 {
            let tr = g.add(f.track_s, f.track_u)?;
            parts.push(g.scale(tr, w.track)?);
            parts.push(g.scale(f.asso, w.asso)?);
        }
    }
    g.add_all(&parts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipLossReport {
    /// Components per frame; first-frame track and association entries are 0.
    pub frames: Vec<FrameTerms<f64>>,
    pub detection: f64,
    pub track: f64,
    pub association: f64,
    pub total: f64,
}

/// Weighted clip total from plain component values.
pub fn clip_loss(frames: &[FrameTerms<f64>], w: &LossWeights) -> ClipLossReport {
    let mut kept = Vec::with_capacity(frames.len());
    let (mut det, mut track, mut asso) = (0.0, 0.0, 0.0);
    for (t, f) in frames.iter().enumerate() {
        let f = if t == 0 {
            FrameTerms {
                track_s: 0.0,
                track_u: 0.0,
                asso: 0.0,
                ..*f
            }
        } else {
            *f
        };
        det += w.det * (f.det_s + f.det_u);
        track += w.track * (f.track_s + f.track_u);
        asso += w.asso * f.asso;
        kept.push(f);
    }
    ClipLossReport {
        frames: kept,
        detection: det,
        track,
        association: asso,
        total: det + track + asso,
    }
}
