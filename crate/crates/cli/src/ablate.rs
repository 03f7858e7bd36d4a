//! Ablation sweeps: supervision toggles, object-query assignment variants
//! and clip length, each over several seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use hybridtrack::assigner::MatchStrategy;
use hybridtrack::metrics::SummaryRow;
use hybridtrack::numcore::ParamStore;
use hybridtrack::simworld::{load_scene_dir, Scene};
use hybridtrack::tracker::{GtRange, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::eval::{summarize, track_all};
use crate::train::{pretrain, train_in_memory};
use crate::{create_dir, write_file, CliError, CliResult};

pub const RUNS_FILE: &str = "ablation_runs.csv";
pub const MEDIAN_FILE: &str = "ablation_median.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grid {
    /// Toggles o2m / o2o / asso on the twin decoder.
    Supervision,
    /// Where object queries get one-to-many labels, and against which targets.
    Assignment,
    /// Training clip length.
    ClipLength,
}

impl Grid {
    pub fn name(self) -> &'static str {
        match self {
            Grid::Supervision => "supervision",
            Grid::Assignment => "assignment",
            Grid::ClipLength => "clip-length",
        }
    }

    pub fn parse(s: &str) -> Result<Vec<Grid>, String> {
        match s {
            "supervision" => Ok(vec![Grid::Supervision]),
            "assignment" => Ok(vec![Grid::Assignment]),
            "clip-length" => Ok(vec![Grid::ClipLength]),
            "all" => Ok(vec![Grid::Supervision, Grid::Assignment, Grid::ClipLength]),
            _ => Err(format!("unknown grid {s:?} (supervision, assignment, clip-length, all)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub grid: Grid,
    /// 1-based row index within the grid.
    pub index: usize,
    pub label: String,
    pub train: TrainConfig,
    pub clip_len: usize,
}

fn toggled(base: &TrainConfig, o2m: bool, o2o: bool, asso: bool) -> TrainConfig {
    TrainConfig {
        o2m,
        o2o,
        asso,
        ..base.clone()
    }
}

/// Rows of a grid, built on `cfg.train` and `cfg.clip_len`.
pub fn variants(grid: Grid, cfg: &RunConfig) -> Vec<Variant> {
    let base = &cfg.train;
    let row = |index: usize, label: &str, train: TrainConfig, clip_len: usize| Variant {
        grid,
        index,
        label: label.to_string(),
        train,
        clip_len,
    };
    let k = cfg.clip_len;
    match grid {
        Grid::Supervision => vec![
            row(1, "baseline", toggled(base, false, false, false), k),
            row(2, "o2m", toggled(base, true, false, false), k),
            row(3, "o2o", toggled(base, false, true, false), k),
            row(4, "o2m+o2o", toggled(base, true, true, false), k),
            row(5, "o2m+o2o+asso", toggled(base, true, true, true), k),
        ],
        Grid::Assignment => {
            let full = toggled(base, true, true, true);
            let mut s_o2m = toggled(base, false, false, false);
            s_o2m.s_object_strategy = MatchStrategy::OneToMany;
            let mut all = full.clone();
            all.u_object_range = GtRange::All;
            let mut o2o = full.clone();
            o2o.assign.strategy = MatchStrategy::OneToOne;
            vec![
                row(1, "S-decoder/new-born/one-to-many", s_o2m, k),
                row(2, "U-decoder/all/one-to-many", all, k),
                row(3, "U-decoder/consistent/one-to-one", o2o, k),
                row(4, "U-decoder/consistent/one-to-many", full, k),
            ]
        }
        Grid::ClipLength => {
            let full = toggled(base, true, true, true);
            [2, 3, 4]
                .iter()
                .enumerate()
                .filter(|(_, &k)| k <= cfg.sim.num_frames)
                .map(|(i, &k)| row(i + 1, &format!("K={k}"), full.clone(), k))
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub grid: Grid,
    pub index: usize,
    pub label: String,
    pub seed: u64,
    pub summary: SummaryRow,
    /// Clip training plus evaluation.
    pub seconds: f64,
    /// The seed's shared single-frame warm-up.
    pub warmup_seconds: f64,
}

/// Median by the usual order statistic: the middle element, or the mean
/// of the two middle elements for an even count. `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MedianRow {
    pub grid: Grid,
    pub index: usize,
    pub label: String,
    pub seeds: usize,
    pub amota: f64,
    pub amotp: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub cells: Vec<CellResult>,
}

impl AblationTable {
    pub fn medians(&self) -> Vec<MedianRow> {
        let mut groups: BTreeMap<(Grid, usize), Vec<&CellResult>> = BTreeMap::new();
        for c in &self.cells {
            groups.entry((c.grid, c.index)).or_default().push(c);
        }
        groups
            .into_iter()
            .map(|((grid, index), cells)| {
                let col = |f: fn(&SummaryRow) -> f64| {
                    median(&cells.iter().map(|c| f(&c.summary)).collect::<Vec<_>>()).expect("group is non-empty")
                };
                MedianRow {
                    grid,
                    index,
                    label: cells[0].label.clone(),
                    seeds: cells.len(),
                    amota: col(|r| r.amota),
                    amotp: col(|r| r.amotp),
                    recall: col(|r| r.recall),
                }
            })
            .collect()
    }

    pub fn median_of(&self, grid: Grid, label: &str) -> Option<MedianRow> {
        self.medians().into_iter().find(|m| m.grid == grid && m.label == label)
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from("grid,index,label,seed,AMOTA,AMOTP,Recall,MOTA,IDS,FP,FN,mAP,seconds,warmup_seconds\n");
        for c in &self.cells {
            let r = &c.summary;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{:.1},{:.1}",
                c.grid.name(),
                c.index,
                c.label,
                c.seed,
                r.amota,
                r.amotp,
                r.recall,
                r.mota,
                r.ids,
                r.fp,
                r.fn_,
                r.map,
                c.seconds,
                c.warmup_seconds
            );
        }
        s
    }

    pub fn median_csv(&self) -> String {
        let mut s = String::from("grid,index,label,seeds,AMOTA,AMOTP,Recall\n");
        for m in self.medians() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                m.grid.name(),
                m.index,
                m.label,
                m.seeds,
                m.amota,
                m.amotp,
                m.recall
            );
        }
        s
    }
}

/// Trains and evaluates every (variant, seed) cell of the given grids.
/// `progress` sees each finished cell.
pub fn run_ablation(
    cfg: &RunConfig,
    grids: &[Grid],
    train_scenes: &[Scene],
    eval_scenes: &[Scene],
    progress: impl FnMut(&CellResult),
) -> CliResult<AblationTable> {
    let rows: Vec<Variant> = grids.iter().flat_map(|&g| variants(g, cfg)).collect();
    run_variants(cfg, &rows, train_scenes, eval_scenes, progress)
}

/// Trains and evaluates each row for every seed in `cfg.seeds`. The
/// single-frame warm-up is computed once per seed and shared by that
/// seed's rows; rows with identical training settings are trained once.
pub fn run_variants(
    cfg: &RunConfig,
    rows: &[Variant],
    train_scenes: &[Scene],
    eval_scenes: &[Scene],
    mut progress: impl FnMut(&CellResult),
) -> CliResult<AblationTable> {
    cfg.validate()?;
    if eval_scenes.is_empty() {
        return Err(CliError::Usage("no evaluation scenes".into()));
    }
    let mut table = AblationTable::default();
    for &seed in &cfg.seeds {
        let seeded = RunConfig { seed, ..cfg.clone() };
        let start = Instant::now();
        let warm: ParamStore = pretrain(&seeded, train_scenes)?;
        let warmup_seconds = start.elapsed().as_secs_f64();
        let mut done: Vec<(TrainConfig, usize, SummaryRow, f64)> = Vec::new();
        for v in rows {
            let start = Instant::now();
            let (summary, seconds) = match done.iter().find(|d| d.0 == v.train && d.1 == v.clip_len) {
                Some(d) => (d.2.clone(), d.3),
                None => {
                    let run_cfg = RunConfig {
                        train: v.train.clone(),
                        clip_len: v.clip_len,
                        ..seeded.clone()
                    };
                    let (store, _) = train_in_memory(&run_cfg, train_scenes, Some(warm.clone()))?;
                    let emissions = track_all(&run_cfg, &store, eval_scenes)?;
                    let summary = summarize(&run_cfg, eval_scenes, &emissions)?.overall().clone();
                    let secs = start.elapsed().as_secs_f64();
                    done.push((v.train.clone(), v.clip_len, summary.clone(), secs));
                    (summary, secs)
                }
            };
            let cell = CellResult {
                grid: v.grid,
                index: v.index,
                label: v.label.clone(),
                seed,
                summary,
                seconds,
                warmup_seconds,
            };
            progress(&cell);
            table.cells.push(cell);
        }
    }
    Ok(table)
}

/// Runs the sweep on `scenes_dir/train` and `scenes_dir/eval`, writing
/// per-seed and median CSVs plus the config snapshot into `out`.
pub fn cmd_ablate(
    cfg: &RunConfig,
    grids: &[Grid],
    scenes_dir: &Path,
    out: &Path,
    progress: impl FnMut(&CellResult),
) -> CliResult<AblationTable> {
    cfg.validate()?;
    let train = load_scene_dir(&scenes_dir.join("train"))?;
    let eval = load_scene_dir(&scenes_dir.join("eval"))?;
    create_dir(out)?;
    write_file(&out.join(crate::train::CONFIG_FILE), cfg.to_json().as_bytes())?;
    let table = run_ablation(cfg, grids, &train, &eval, progress)?;
    write_file(&out.join(RUNS_FILE), table.runs_csv().as_bytes())?;
    write_file(&out.join(MEDIAN_FILE), table.median_csv().as_bytes())?;
    Ok(table)
}
