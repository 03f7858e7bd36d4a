//! Tracking and detection evaluation on bird's-eye-view centers.
//!
//! [`clear`] matches boxes to ground truth frame by frame and counts
//! CLEAR-MOT events, [`amota`] sweeps score thresholds over recall targets,
//! and [`detection`] computes center-distance average precision.

pub mod amota;
pub mod clear;
pub mod detection;

use serde::{Deserialize, Serialize};

pub use amota::{amota, AmotaResult, MotarRecall, RECALL_POINTS};
pub use clear::{clear_mot, match_frames, FrameMatching, MotCounts};
pub use detection::{map_detection, MapResult, DISTANCE_THRESHOLDS};

use crate::simworld::GroundTruthFrame;
use crate::tracker::Emission;
use crate::Result;

/// Default BEV center gate (m).
pub const D_MATCH: f64 = 2.0;

/// One tracked or detected box as the metrics see it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackBox {
    pub t: usize,
    pub id: u64,
    pub class: usize,
    pub score: Option<f64>,
    pub center: [f64; 2],
}

impl From<&Emission> for TrackBox {
    fn from(e: &Emission) -> Self {
        TrackBox {
            t: e.t,
            id: e.id,
            class: e.class,
            score: Some(e.score),
            center: [e.bbox[0], e.bbox[1]],
        }
    }
}

/// Ground truth and predictions of one scene; predictions sorted by frame.
#[derive(Clone, Copy, Debug)]
pub struct SceneTracks<'a> {
    pub frames: &'a [GroundTruthFrame],
    pub preds: &'a [TrackBox],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// `None` for the row aggregated over classes.
    pub class: Option<usize>,
    pub amota: f64,
    pub amotp: f64,
    pub mota: f64,
    pub recall: f64,
    pub ids: usize,
    pub fp: usize,
    pub fn_: usize,
    pub map: f64,
}

/// Per-class rows followed by the aggregate. Secondary counts come from the
/// sweep point with the best MOTA; the aggregate averages rates over
/// classes and sums counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingSummary {
    pub rows: Vec<SummaryRow>,
}

impl TrackingSummary {
    pub fn overall(&self) -> &SummaryRow {
        self.rows.last().expect("summary always has an aggregate row")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,AMOTA,AMOTP,MOTA,Recall,IDS,FP,FN,mAP\n");
        for r in &self.rows {
            let class = r.class.map_or_else(|| "all".to_string(), |c| c.to_string());
            s.push_str(&format!(
                "{class},{},{},{},{},{},{},{},{}\n",
                r.amota, r.amotp, r.mota, r.recall, r.ids, r.fp, r.fn_, r.map
            ));
        }
        s
    }
}

/// Full evaluation over scenes: tracking metrics per class with ground
/// truth plus mean center-distance AP.
pub fn evaluate(scenes: &[SceneTracks], d_match: f64, mode: MotarRecall) -> Result<TrackingSummary> {
    let det = map_detection(scenes, &DISTANCE_THRESHOLDS)?;
    let mut rows = Vec::new();
    for &class in det.per_class.keys() {
        let Some(res) = amota(scenes, class, d_match, mode)? else { continue };
        let c = match res.best_mota() {
            Some(p) => p.counts,
            None => {
                let mut c = MotCounts::default();
                for s in scenes {
                    c.add(&clear::counts(&match_frames(s.frames, s.preds, class, d_match)?));
                }
                c
            }
        };
        rows.push(SummaryRow {
            class: Some(class),
            amota: res.amota,
            amotp: res.amotp,
            mota: c.mota(),
            recall: c.recall(),
            ids: c.ids,
            fp: c.fp,
            fn_: c.fn_,
            map: det.class_ap(class).unwrap_or(0.0),
        });
    }
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&SummaryRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let overall = SummaryRow {
        class: None,
        amota: mean(|r| r.amota),
        amotp: if rows.is_empty() { d_match } else { mean(|r| r.amotp) },
        mota: mean(|r| r.mota),
        recall: mean(|r| r.recall),
        ids: rows.iter().map(|r| r.ids).sum(),
        fp: rows.iter().map(|r| r.fp).sum(),
        fn_: rows.iter().map(|r| r.fn_).sum(),
        map: det.map,
    };
    rows.push(overall);
    Ok(TrackingSummary { rows })
}


#[cfg(test)]
mod tests {
    use super::test_support::{frame, pred};
    use super::*;

    #[test]
    fn oracle_summary_is_perfect() {
        let frames: Vec<_> = (0..5)
            .map(|t| frame(t, &[(1, 0, [t as f64, 1.0]), (2, 1, [-3.0, t as f64]), (3, 1, [9.0, 9.0])]))
            .collect();
        let preds: Vec<TrackBox> = frames
            .iter()
            .flat_map(|f| f.targets.iter().map(move |g| pred(f.t, g.id, g.class_id, 1.0, [g.center[0], g.center[1]])))
            .collect();
        let s = [SceneTracks {
            frames: &frames,
            preds: &preds,
        }];
        let sum = evaluate(&s, D_MATCH, MotarRecall::Achieved).unwrap();
        assert_eq!(sum.rows.len(), 3);
        for r in &sum.rows {
            assert_eq!((r.amota, r.amotp, r.mota, r.recall, r.map), (1.0, 0.0, 1.0, 1.0, 1.0));
            assert_eq!((r.ids, r.fp, r.fn_), (0, 0, 0));
        }
        let csv = sum.to_csv();
        assert!(csv.starts_with("class,AMOTA,AMOTP,MOTA,Recall,IDS,FP,FN,mAP\n0,1,0,1,1,0,0,0,1\n"));
        assert!(csv.ends_with("all,1,0,1,1,0,0,0,1\n"));
    }

    #[test]
    fn tp_plus_fn_is_gt() {
        let frames: Vec<_> = (0..4).map(|t| frame(t, &[(1, 0, [0.0, 0.0]), (2, 0, [3.0, 0.0])])).collect();
        let preds = vec![
            pred(0, 1, 0, 0.5, [0.3, 0.0]),
            pred(1, 1, 0, 0.5, [2.9, 0.0]),
            pred(1, 4, 0, 0.5, [50.0, 0.0]),
            pred(3, 2, 0, 0.5, [0.0, 0.1]),
        ];
        let m = match_frames(&frames, &preds, 0, D_MATCH).unwrap();
        for (f, fm) in frames.iter().zip(&m) {
            assert_eq!(fm.pairs.len() + fm.misses.len(), f.targets.len());
            let np = preds.iter().filter(|p| p.t == f.t).count();
            assert_eq!(fm.pairs.len() + fm.false_positives.len(), np);
        }
    }

    #[test]
    fn empty_everything() {
        let sum = evaluate(&[], D_MATCH, MotarRecall::Achieved).unwrap();
        assert_eq!(sum.rows.len(), 1);
        assert_eq!(sum.overall().amota, 0.0);
    }
}
