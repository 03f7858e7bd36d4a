//! Center-distance average precision.

use std::collections::BTreeMap;

use super::clear::by_frame;
use super::SceneTracks;
use crate::{Error, Result};

pub const DISTANCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
const RECALL_GRID: usize = 101;

/// Area under the interpolated precision-recall curve sampled at 101
/// evenly spaced recalls. `curve` holds `(recall, precision)` in ranking
/// order.
pub fn interpolated_ap(curve: &[(f64, f64)]) -> f64 {
    let mut envelope: Vec<(f64, f64)> = curve.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..RECALL_GRID {
        let r = i as f64 / (RECALL_GRID - 1) as f64;
        while k < envelope.len() && envelope[k].0 < r - 1e-12 {
            k += 1;
        }
        if k < envelope.len() {
            sum += envelope[k].1;
        }
    }
    sum / RECALL_GRID as f64
}

/// AP of one class at one distance threshold. Boxes are ranked by score
/// (ties by scene, frame and position); each takes the nearest still
/// unmatched ground truth of its frame within `threshold`.
pub fn average_precision(scenes: &[SceneTracks], class: usize, threshold: f64) -> Result<Option<f64>> {
    let mut ranked = Vec::new();
    let mut gt_total = 0;
    let mut taken: Vec<Vec<Vec<bool>>> = Vec::with_capacity(scenes.len());
    for (si, s) in scenes.iter().enumerate() {
        by_frame(s.frames.len(), s.preds)?;
        gt_total += s.frames.iter().flat_map(|f| &f.targets).filter(|g| g.class_id == class).count();
        taken.push(s.frames.iter().map(|f| vec![false; f.targets.len()]).collect());
        for (j, p) in s.preds.iter().enumerate().filter(|(_, p)| p.class == class) {
            let score = p
                .score
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::contract(format!("detection {} on frame {} has no finite score", p.id, p.t)))?;
            ranked.push((score, si, j));
        }
    }
    if gt_total == 0 {
        return Ok(None);
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for (n, &(_, si, j)) in ranked.iter().enumerate() {
        let p = &scenes[si].preds[j];
        let frame = &scenes[si].frames[p.t];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in frame.targets.iter().enumerate() {
            if g.class_id != class || taken[si][p.t][gi] {
                continue;
            }
            let d = (g.center[0] - p.center[0]).hypot(g.center[1] - p.center[1]);
            if d <= threshold && best.is_none_or(|b| d < b.1) {
                best = Some((gi, d));
            }
        }
        if let Some((gi, _)) = best {
            taken[si][p.t][gi] = true;
            tp += 1;
        }
        curve.push((tp as f64 / gt_total as f64, tp as f64 / (n + 1) as f64));
    }
    Ok(Some(interpolated_ap(&curve)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    pub map: f64,
    /// Per class, AP at each distance threshold.
    pub per_class: BTreeMap<usize, Vec<f64>>,
}

impl MapResult {
    pub fn class_ap(&self, class: usize) -> Option<f64> {
        self.per_class.get(&class).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Mean AP over every class with ground truth and every threshold; 0 when
/// no class has ground truth.
pub fn map_detection(scenes: &[SceneTracks], thresholds: &[f64]) -> Result<MapResult> {
    if thresholds.is_empty() {
        return Err(Error::contract("mAP needs at least one distance threshold"));
    }
    let classes: std::collections::BTreeSet<usize> = scenes
        .iter()
        .flat_map(|s| s.frames.iter().flat_map(|f| f.targets.iter().map(|g| g.class_id)))
        .collect();
    let mut per_class = BTreeMap::new();
    for c in classes {
        let aps = thresholds
            .iter()
            .map(|&t| Ok(average_precision(scenes, c, t)?.unwrap_or(0.0)))
            .collect::<Result<Vec<f64>>>()?;
        per_class.insert(c, aps);
    }
    let all: Vec<f64> = per_class.values().flatten().copied().collect();
    let map = if all.is_empty() { 0.0 } else { all.iter().sum::<f64>() / all.len() as f64 };
    Ok(MapResult { map, per_class })
}
