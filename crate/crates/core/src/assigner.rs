//! Label assignment: identity matching for track queries, Hungarian
//! one-to-one matching, and thresholded bottom-k one-to-many matching.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::decoder::{BoxCoder, Box3D, ClassScores, BOX_CODE_LEN};
use crate::simworld::GroundTruthTarget;
use crate::{Error, Result};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Rows are ground truths, columns are queries.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("CostMatrix", format!("{} values for {rows}x{cols}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite cost"));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        CostMatrix::new(self.rows, self.cols, self.data.iter().map(|v| v * c).collect())
    }

    /// Sum of the costs of `pairs`, accumulated in the given order.
    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(i, j)| self.at(i, j)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchStrategy {
    OneToOne,
    OneToMany,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignConfig {
    /// Pairs costlier than this are dropped before one-to-many selection.
    pub tau: f64,
    /// Maximum queries per ground truth.
    pub k: usize,
    pub strategy: MatchStrategy,
    /// When set, an object query serves at most one ground truth.
    pub exclusive_queries: bool,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            tau: 2.0,
            k: 4,
            strategy: MatchStrategy::OneToMany,
            exclusive_queries: true,
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssignmentResult {
    /// `(gt index, query index)`, sorted.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl AssignmentResult {
    fn from_pairs(mut pairs: Vec<(usize, usize)>, num_gts: usize, num_queries: usize) -> Self {
        pairs.sort_unstable();
        let mut gt_used = vec![false; num_gts];
        let mut q_used = vec![false; num_queries];
        for &(i, j) in &pairs {
            gt_used[i] = true;
            q_used[j] = true;
        }
        AssignmentResult {
            unmatched_gts: (0..num_gts).filter(|&i| !gt_used[i]).collect(),
            unmatched_queries: (0..num_queries).filter(|&j| !q_used[j]).collect(),
            pairs,
        }
    }

    /// Ground truth assigned to each query, if any.
    pub fn gt_of_query(&self, num_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_queries];
        for &(i, j) in &self.pairs {
            out[j] = Some(i);
        }
        out
    }
}

/// Binary focal loss of one probability against a 0/1 target.
/// Probabilities are clamped away from 0 and 1 so endpoint inputs stay finite.
pub fn focal_cost_elem(p: f64, positive: bool) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    if positive {
        -FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * p.ln()
    } else {
        -(1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * (1.0 - p).ln()
    }
}

/// Focal classification cost summed over classes plus weighted L1 over box codes.
pub fn pair_cost(gt_code: &[f64], gt_class: usize, pred_code: &[f64], probs: &[f64], weights: &[f64]) -> f64 {
    let cls: f64 = probs
        .iter()
        .enumerate()
        .map(|(c, &p)| focal_cost_elem(p, c == gt_class))
        .sum();
    let l1: f64 = gt_code
        .iter()
        .zip(pred_code)
        .zip(weights)
        .map(|((a, b), w)| w * (a - b).abs())
        .sum();
    cls + l1
}

/// Cost matrix from raw box codes (`N x 10`, row-major) and class probabilities
/// (`N x N_c`).
pub fn cost_from_codes(
    gts: &[GroundTruthTarget],
    coder: &BoxCoder,
    pred_codes: &[f64],
    pred_probs: &[f64],
    num_classes: usize,
) -> Result<CostMatrix> {
    let n = pred_codes.len() / BOX_CODE_LEN;
    if pred_codes.len() != n * BOX_CODE_LEN || pred_probs.len() != n * num_classes {
        return Err(Error::shape("matching_cost", "prediction buffers disagree"));
    }
    if pred_codes.iter().chain(pred_probs).any(|v| !v.is_finite()) {
        return Err(Error::contract("non-finite prediction"));
    }
    let mut data = Vec::with_capacity(gts.len() * n);
    for gt in gts {
        if gt.class_id >= num_classes {
            return Err(Error::contract(format!("gt class {} out of range", gt.class_id)));
        }
        let code = coder.encode(&gt_box(gt));
        for j in 0..n {
            data.push(pair_cost(
                &code,
                gt.class_id,
                &pred_codes[j * BOX_CODE_LEN..(j + 1) * BOX_CODE_LEN],
                &pred_probs[j * num_classes..(j + 1) * num_classes],
                &coder.weights,
            ));
        }
    }
    CostMatrix::new(gts.len(), n, data)
}

pub fn gt_box(gt: &GroundTruthTarget) -> Box3D {
    Box3D {
        center: gt.center,
        size: gt.size,
        yaw: gt.yaw,
        velocity: gt.velocity,
    }
}

pub fn matching_cost(
    gts: &[GroundTruthTarget],
    preds: &[(Box3D, ClassScores)],
    coder: &BoxCoder,
) -> Result<CostMatrix> {
    if gts.is_empty() || preds.is_empty() {
        return Err(Error::contract("matching cost needs ground truths and predictions"));
    }
    let nc = preds[0].1 .0.len();
    if preds.iter().any(|(_, s)| s.0.len() != nc) {
        return Err(Error::shape("matching_cost", "ragged class scores"));
    }
    let codes: Vec<f64> = preds.iter().flat_map(|(b, _)| coder.encode(b)).collect();
    let probs: Vec<f64> = preds.iter().flat_map(|(_, s)| s.0.iter().copied()).collect();
    cost_from_codes(gts, coder, &codes, &probs, nc)
}

/// Minimum-cost one-to-one matching of size `min(rows, cols)`.
pub fn hungarian(cost: &CostMatrix) -> AssignmentResult {
    let (r, c) = (cost.rows, cost.cols);
    if r == 0 || c == 0 {
        return AssignmentResult::from_pairs(vec![], r, c);
    }
    let pairs = if r <= c {
        solve(r, c, |i, j| cost.at(i, j))
    } else {
        solve(c, r, |i, j| cost.at(j, i)).into_iter().map(|(j, i)| (i, j)).collect()
    };
    AssignmentResult::from_pairs(pairs, r, c)
}

/// Shortest augmenting path with potentials; requires `n <= m`.
fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) matched to column j; column 0 is a sentinel
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect()
}

/// Pairs each track query with the ground truth carrying its id.
pub fn assign_track_queries(track_ids: &[u64], gts: &[GroundTruthTarget]) -> Result<AssignmentResult> {
    let mut by_id = HashMap::with_capacity(track_ids.len());
    for (j, &id) in track_ids.iter().enumerate() {
        if by_id.insert(id, j).is_some() {
            return Err(Error::contract(format!("duplicate track id {id}")));
        }
    }
    let pairs = gts
        .iter()
        .enumerate()
        .filter_map(|(i, gt)| by_id.get(&gt.id).map(|&j| (i, j)))
        .collect();
    Ok(AssignmentResult::from_pairs(pairs, gts.len(), track_ids.len()))
}

/// Thresholded greedy bottom-k assignment.
pub fn assign_one_to_many(cost: &CostMatrix, cfg: &AssignConfig) -> Result<AssignmentResult> {
    cfg.validate()?;
    let mut cand: Vec<(f64, usize, usize)> = (0..cost.rows)
        .flat_map(|i| (0..cost.cols).map(move |j| (i, j)))
        .map(|(i, j)| (cost.at(i, j), i, j))
        .filter(|(c, _, _)| *c <= cfg.tau)
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut per_gt = vec![0usize; cost.rows];
    let mut per_query = vec![0usize; cost.cols];
    let mut pairs = Vec::new();
    for (_, i, j) in cand {
        if per_gt[i] < cfg.k && (!cfg.exclusive_queries || per_query[j] == 0) {
            per_gt[i] += 1;
            per_query[j] += 1;
            pairs.push((i, j));
        }
    }
    Ok(AssignmentResult::from_pairs(pairs, cost.rows, cost.cols))
}

/// Dispatches on the configured strategy.
pub fn assign(cost: &CostMatrix, cfg: &AssignConfig) -> Result<AssignmentResult> {
    match cfg.strategy {
        MatchStrategy::OneToOne => Ok(hungarian(cost)),
        MatchStrategy::OneToMany => assign_one_to_many(cost, cfg),
    }
}
