//! Tracking accuracy averaged over a sweep of recall targets.

use serde::{Deserialize, Serialize};

use super::clear::{counts, match_frames, MotCounts};
use super::SceneTracks;
use crate::{Error, Result};

pub const RECALL_POINTS: usize = 40;

/// Recall used to normalise MOTAR at each sweep point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MotarRecall {
    /// Recall reached at the chosen score threshold, as the benchmark
    /// toolkit computes it; MOTAR reduces to `1 - (IDS + FP) / TP`.
    #[default]
    Achieved,
    /// The nominal sweep target `r`.
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub target: f64,
    pub threshold: f64,
    pub counts: MotCounts,
    pub motar: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmotaResult {
    pub amota: f64,
    pub amotp: f64,
    /// Sweep points whose recall target some score threshold reaches.
    pub points: Vec<SweepPoint>,
}

impl AmotaResult {
    /// The reached point with the best MOTA, used for secondary metrics.
    pub fn best_mota(&self) -> Option<&SweepPoint> {
        self.points
            .iter()
            .max_by(|a, b| a.counts.mota().total_cmp(&b.counts.mota()).then(b.threshold.total_cmp(&a.threshold)))
    }
}

pub fn motar(c: &MotCounts, target: f64, mode: MotarRecall) -> f64 {
    if c.gt == 0 || c.tp == 0 {
        return 0.0;
    }
    let p = c.gt as f64;
    let r = match mode {
        MotarRecall::Achieved => c.tp as f64 / p,
        MotarRecall::Target => target,
    };
    // a target below the reached recall would otherwise exceed 1
    let v = 1.0 - ((c.ids + c.fp + c.fn_) as f64 - (1.0 - r) * p) / (r * p);
    v.clamp(0.0, 1.0)
}

fn scene_counts(scenes: &[SceneTracks], class: usize, d_match: f64, min_score: f64) -> Result<MotCounts> {
    let mut total = MotCounts::default();
    for s in scenes {
        let kept: Vec<_> = s
            .preds
            .iter()
            .filter(|p| p.score.is_some_and(|v| v >= min_score))
            .copied()
            .collect();
        total.add(&counts(&match_frames(s.frames, &kept, class, d_match)?));
    }
    Ok(total)
}

/// AMOTA and AMOTP of one class over a set of scenes. Score thresholds are
/// read off the scores of predictions matched when nothing is filtered:
/// reaching recall `r` keeps every prediction scoring at least the
/// `ceil(r * P)`-th best matched score. Unreached targets count as zero
/// MOTAR and do not enter AMOTP; with none reached AMOTP is `d_match`.
/// `None` when the class has no ground truth.
pub fn amota(scenes: &[SceneTracks], class: usize, d_match: f64, mode: MotarRecall) -> Result<Option<AmotaResult>> {
    for s in scenes {
        if let Some(p) = s.preds.iter().find(|p| !p.score.is_some_and(f64::is_finite)) {
            return Err(Error::contract(format!("prediction {} on frame {} has no finite score", p.id, p.t)));
        }
    }
    let mut matched_scores = Vec::new();
    let mut gt = 0;
    for s in scenes {
        let m = match_frames(s.frames, s.preds, class, d_match)?;
        gt += counts(&m).gt;
        for f in &m {
            matched_scores.extend(f.pairs.iter().map(|&(_, p, _)| s.preds[p].score.unwrap_or(0.0)));
        }
    }
    if gt == 0 {
        return Ok(None);
    }
    matched_scores.sort_by(|a, b| b.total_cmp(a));

    let mut points = Vec::new();
    let mut motar_sum = 0.0;
    for i in 1..=RECALL_POINTS {
        let target = i as f64 / RECALL_POINTS as f64;
        let need = ((target * gt as f64) - 1e-9).ceil().max(1.0) as usize;
        if need > matched_scores.len() {
            continue;
        }
        let threshold = matched_scores[need - 1];
        let c = scene_counts(scenes, class, d_match, threshold)?;
        let m = motar(&c, target, mode);
        motar_sum += m;
        points.push(SweepPoint {
            target,
            threshold,
            counts: c,
            motar: m,
        });
    }
    let amotp = if points.is_empty() {
        d_match
    } else {
        points.iter().map(|p| p.counts.motp()).sum::<f64>() / points.len() as f64
    };
    Ok(Some(AmotaResult {
        amota: motar_sum / RECALL_POINTS as f64,
        amotp,
        points,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::test_support::{frame, pred};
    use crate::metrics::TrackBox;
    use crate::simworld::GroundTruthFrame;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn perfect(frames: &[GroundTruthFrame]) -> Vec<TrackBox> {
        frames
            .iter()
            .flat_map(|f| f.targets.iter().map(move |g| pred(f.t, g.id, g.class_id, 1.0, [g.center[0], g.center[1]])))
            .collect()
    }

    #[test]
    fn perfect_and_empty() {
        let frames: Vec<_> = (0..4).map(|t| frame(t, &[(1, 0, [t as f64, 0.0]), (2, 0, [-5.0, 3.0])])).collect();
        let preds = perfect(&frames);
        let s = [SceneTracks {
            frames: &frames,
            preds: &preds,
        }];
        let r = amota(&s, 0, 2.0, MotarRecall::Achieved).unwrap().unwrap();
        assert_eq!(r.amota, 1.0);
        assert_eq!(r.amotp, 0.0);
        assert_eq!(r.points.len(), RECALL_POINTS);
        let e = [SceneTracks {
            frames: &frames,
            preds: &[],
        }];
        let r = amota(&e, 0, 2.0, MotarRecall::Achieved).unwrap().unwrap();
        assert_eq!(r.amota, 0.0);
        assert_eq!(r.amotp, 2.0);
        assert!(amota(&e, 3, 2.0, MotarRecall::Achieved).unwrap().is_none());
    }

    #[test]
    fn unscored_prediction_rejected() {
        let frames = vec![frame(0, &[(1, 0, [0.0, 0.0])])];
        let mut p = pred(0, 1, 0, 1.0, [0.0, 0.0]);
        p.score = None;
        let s = [SceneTracks {
            frames: &frames,
            preds: &[p],
        }];
        assert!(amota(&s, 0, 2.0, MotarRecall::Achieved).is_err());
        p.score = Some(f64::NAN);
        let s = [SceneTracks {
            frames: &frames,
            preds: &[p],
        }];
        assert!(amota(&s, 0, 2.0, MotarRecall::Achieved).is_err());
    }

    #[test]
    fn half_recall_hand_case() {
        // two frames with one target each; only the first is found, with a
        // spurious box alongside at a lower score
        let frames: Vec<_> = (0..2).map(|t| frame(t, &[(1, 0, [0.0, 0.0])])).collect();
        let preds = vec![pred(0, 1, 0, 0.9, [0.0, 0.0]), pred(1, 2, 0, 0.3, [40.0, 0.0])];
        let s = [SceneTracks {
            frames: &frames,
            preds: &preds,
        }];
        let r = amota(&s, 0, 2.0, MotarRecall::Achieved).unwrap().unwrap();
        // targets up to 0.5 reach recall 1/2 at threshold 0.9 with no FP
        assert_eq!(r.points.len(), RECALL_POINTS / 2);
        assert!(r.points.iter().all(|p| p.threshold == 0.9 && p.counts.fp == 0));
        assert!((r.amota - 0.5).abs() < 1e-15);
        let t = amota(&s, 0, 2.0, MotarRecall::Target).unwrap().unwrap();
        // MOTAR(r) = 1 - (1 - (1 - r) 2) / (2 r) = 1 - (2r - 1) / (2r) = 1 / (2r), capped by 1
        let want: f64 = (1..=20).map(|i| (1.0 / (2.0 * i as f64 / 40.0)).min(1.0)).sum::<f64>() / 40.0;
        assert!((t.amota - want).abs() < 1e-12, "{} vs {want}", t.amota);
    }

    // ---- independent reference -------------------------------------------

    struct RefBox {
        t: usize,
        id: u64,
        score: f64,
        x: f64,
        y: f64,
    }

    /// All injective matchings of the gated pairs, by brute force; the best
    /// one has the most pairs, then the smallest distance sum.
    fn best_matching(cands: &[(usize, usize, f64)], ng: usize, np: usize) -> Vec<(usize, usize, f64)> {
        fn go(
            k: usize,
            cands: &[(usize, usize, f64)],
            ug: &mut Vec<bool>,
            up: &mut Vec<bool>,
            cur: &mut Vec<(usize, usize, f64)>,
            best: &mut (usize, f64, Vec<(usize, usize, f64)>),
        ) {
            if k == cands.len() {
                let d: f64 = cur.iter().map(|c| c.2).sum();
                if cur.len() > best.0 || (cur.len() == best.0 && d < best.1 - 1e-12) {
                    *best = (cur.len(), d, cur.clone());
                }
                return;
            }
            go(k + 1, cands, ug, up, cur, best);
            let (g, p, d) = cands[k];
            if !ug[g] && !up[p] {
                ug[g] = true;
                up[p] = true;
                cur.push((g, p, d));
                go(k + 1, cands, ug, up, cur, best);
                cur.pop();
                ug[g] = false;
                up[p] = false;
            }
        }
        let mut best = (0, f64::INFINITY, Vec::new());
        go(0, cands, &mut vec![false; ng], &mut vec![false; np], &mut Vec::new(), &mut best);
        best.2
    }

    /// (tp, fp, fn, ids, dist) over one scene of a single class.
    fn ref_mot(gts: &[Vec<(u64, f64, f64)>], boxes: &[&RefBox]) -> (usize, usize, usize, usize, f64) {
        let mut last: HashMap<u64, u64> = HashMap::new();
        let (mut tp, mut fp, mut fnn, mut ids, mut dist) = (0, 0, 0, 0, 0.0);
        for (t, g) in gts.iter().enumerate() {
            let p: Vec<&&RefBox> = boxes.iter().filter(|b| b.t == t).collect();
            let d = |i: usize, j: usize| ((g[i].1 - p[j].x).powi(2) + (g[i].2 - p[j].y).powi(2)).sqrt();
            let mut taken_g = vec![false; g.len()];
            let mut taken_p = vec![false; p.len()];
            let mut pairs = Vec::new();
            for i in 0..g.len() {
                if let Some(&prev) = last.get(&g[i].0) {
                    if let Some(j) = (0..p.len()).find(|&j| !taken_p[j] && p[j].id == prev && d(i, j) <= 2.0) {
                        taken_g[i] = true;
                        taken_p[j] = true;
                        pairs.push((i, j, d(i, j)));
                    }
                }
            }
            let mut cands = Vec::new();
            for i in (0..g.len()).filter(|&i| !taken_g[i]) {
                for j in (0..p.len()).filter(|&j| !taken_p[j]) {
                    if d(i, j) <= 2.0 {
                        cands.push((i, j, d(i, j)));
                    }
                }
            }
            pairs.extend(best_matching(&cands, g.len(), p.len()));
            for &(i, j, dd) in &pairs {
                if last.insert(g[i].0, p[j].id).is_some_and(|prev| prev != p[j].id) {
                    ids += 1;
                }
                dist += dd;
            }
            tp += pairs.len();
            fp += p.len() - pairs.len();
            fnn += g.len() - pairs.len();
        }
        (tp, fp, fnn, ids, dist)
    }

    fn ref_amota(scenes: &[(Vec<Vec<(u64, f64, f64)>>, Vec<RefBox>)], achieved: bool) -> (f64, f64) {
        let total_gt: usize = scenes.iter().map(|s| s.0.iter().map(Vec::len).sum::<usize>()).sum();
        let mut scores = Vec::new();
        for (g, b) in scenes {
            // matched scores when nothing is filtered: rerun with each box
            // tagged so the matched ones can be read back
            let all: Vec<&RefBox> = b.iter().collect();
            let mut last: HashMap<u64, u64> = HashMap::new();
            for (t, gt) in g.iter().enumerate() {
                let p: Vec<&&RefBox> = all.iter().filter(|x| x.t == t).collect();
                let d = |i: usize, j: usize| ((gt[i].1 - p[j].x).powi(2) + (gt[i].2 - p[j].y).powi(2)).sqrt();
                let mut tg = vec![false; gt.len()];
                let mut tpp = vec![false; p.len()];
                let mut pairs = Vec::new();
                for i in 0..gt.len() {
                    if let Some(&prev) = last.get(&gt[i].0) {
                        if let Some(j) = (0..p.len()).find(|&j| !tpp[j] && p[j].id == prev && d(i, j) <= 2.0) {
                            tg[i] = true;
                            tpp[j] = true;
                            pairs.push((i, j, 0.0));
                        }
                    }
                }
                let mut cands = Vec::new();
                for i in (0..gt.len()).filter(|&i| !tg[i]) {
                    for j in (0..p.len()).filter(|&j| !tpp[j]) {
                        if d(i, j) <= 2.0 {
                            cands.push((i, j, d(i, j)));
                        }
                    }
                }
                pairs.extend(best_matching(&cands, gt.len(), p.len()));
                for &(i, j, _) in &pairs {
                    last.insert(gt[i].0, p[j].id);
                    scores.push(p[j].score);
                }
            }
        }
        scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let (mut sum_motar, mut sum_motp, mut reached) = (0.0, 0.0, 0);
        for i in 1..=40 {
            let r = i as f64 / 40.0;
            let need = (r * total_gt as f64 - 1e-9).ceil() as usize;
            if need == 0 || need > scores.len() {
                continue;
            }
            let thr = scores[need - 1];
            let (mut tp, mut fp, mut fnn, mut ids, mut dist) = (0, 0, 0, 0, 0.0);
            for (g, b) in scenes {
                let kept: Vec<&RefBox> = b.iter().filter(|x| x.score >= thr).collect();
                let c = ref_mot(g, &kept);
                tp += c.0;
                fp += c.1;
                fnn += c.2;
                ids += c.3;
                dist += c.4;
            }
            let p = total_gt as f64;
            let rr = if achieved { tp as f64 / p } else { r };
            let m = if tp == 0 { 0.0 } else { (1.0 - ((ids + fp + fnn) as f64 - (1.0 - rr) * p) / (rr * p)).clamp(0.0, 1.0) };
            sum_motar += m;
            sum_motp += if tp == 0 { 0.0 } else { dist / tp as f64 };
            reached += 1;
        }
        let amotp = if reached == 0 { 2.0 } else { sum_motp / reached as f64 };
        (sum_motar / 40.0, amotp)
    }

    /// Random scenes of a single class with noisy, sometimes swapped,
    /// sometimes missing tracker output and clutter.
    fn random_case(seed: u64) -> Vec<(Vec<Vec<(u64, f64, f64)>>, Vec<RefBox>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..2)
            .map(|_| {
                let n_frames = rng.random_range(2..5);
                let n_obj = rng.random_range(1..4);
                let starts: Vec<(f64, f64)> = (0..n_obj).map(|_| (rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0))).collect();
                let mut gts = Vec::new();
                let mut boxes = Vec::new();
                for t in 0..n_frames {
                    let mut g = Vec::new();
                    for (k, s) in starts.iter().enumerate() {
                        if rng.random_bool(0.85) {
                            let x = s.0 + t as f64 * 0.7;
                            g.push((k as u64 + 1, x, s.1));
                            if rng.random_bool(0.8) {
                                let id = if rng.random_bool(0.15) { 50 + k as u64 } else { k as u64 + 1 };
                                boxes.push(RefBox {
                                    t,
                                    id,
                                    score: rng.random_range(0.0..1.0),
                                    x: x + rng.random_range(-1.5..1.5),
                                    y: s.1 + rng.random_range(-1.5..1.5),
                                });
                            }
                        }
                    }
                    for _ in 0..rng.random_range(0..3) {
                        boxes.push(RefBox {
                            t,
                            id: 90 + rng.random_range(0..3),
                            score: rng.random_range(0.0..1.0),
                            x: rng.random_range(-8.0..8.0),
                            y: rng.random_range(-8.0..8.0),
                        });
                    }
                    gts.push(g);
                }
                (gts, boxes)
            })
            .collect()
    }

    fn to_tracks(case: &[(Vec<Vec<(u64, f64, f64)>>, Vec<RefBox>)]) -> Vec<(Vec<GroundTruthFrame>, Vec<TrackBox>)> {
        case.iter()
            .map(|(g, b)| {
                let frames = g
                    .iter()
                    .enumerate()
                    .map(|(t, v)| frame(t, &v.iter().map(|&(id, x, y)| (id, 0, [x, y])).collect::<Vec<_>>()))
                    .collect();
                let preds = b.iter().map(|r| pred(r.t, r.id, 0, r.score, [r.x, r.y])).collect();
                (frames, preds)
            })
            .collect()
    }

    #[test]
    fn matches_reference_implementation() {
        let mut nontrivial = 0;
        for seed in 0..60 {
            let case = random_case(seed);
            let owned = to_tracks(&case);
            let scenes: Vec<SceneTracks> = owned.iter().map(|(f, p)| SceneTracks { frames: f, preds: p }).collect();
            for (mode, achieved) in [(MotarRecall::Achieved, true), (MotarRecall::Target, false)] {
                let got = amota(&scenes, 0, 2.0, mode).unwrap().unwrap();
                let (want, want_p) = ref_amota(&case, achieved);
                assert!((got.amota - want).abs() < 1e-9, "seed {seed}: {} vs {want}", got.amota);
                assert!((got.amotp - want_p).abs() < 1e-9, "seed {seed}: {} vs {want_p}", got.amotp);
                if want > 0.0 && want < 1.0 {
                    nontrivial += 1;
                }
            }
        }
        assert!(nontrivial > 40, "{nontrivial}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn monotone_score_transform_invariance(seed in 0u64..10_000, a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let owned = to_tracks(&random_case(seed));
            let scenes: Vec<SceneTracks> = owned.iter().map(|(f, p)| SceneTracks { frames: f, preds: p }).collect();
            let moved: Vec<(Vec<GroundTruthFrame>, Vec<TrackBox>)> = owned
                .iter()
                .map(|(f, p)| {
                    let q = p.iter().map(|x| TrackBox { score: x.score.map(|s| (a * s + b).exp()), ..*x }).collect();
                    (f.clone(), q)
                })
                .collect();
            let scenes2: Vec<SceneTracks> = moved.iter().map(|(f, p)| SceneTracks { frames: f, preds: p }).collect();
            let x = amota(&scenes, 0, 2.0, MotarRecall::Achieved).unwrap().unwrap();
            let y = amota(&scenes2, 0, 2.0, MotarRecall::Achieved).unwrap().unwrap();
            prop_assert_eq!(x.amota, y.amota);
            prop_assert_eq!(x.amotp, y.amotp);
            prop_assert!((0.0..=1.0).contains(&x.amota));
        }
    }
}
