//! Evaluation: track held-out scenes, score the emissions.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hybridtrack::decoder::BoxCoder;
use hybridtrack::metrics::{evaluate, SceneTracks, TrackBox, TrackingSummary};
use hybridtrack::numcore::{load_into, ParamStore};
use hybridtrack::simworld::{load_scene_dir, Scene};
use hybridtrack::tracker::{track_scene, Emission};
use serde::Serialize;

use crate::config::RunConfig;
use crate::train::{init_store, CONFIG_FILE};
use crate::{create_dir, write_file, CliError, CliResult};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const EMISSIONS_FILE: &str = "emissions.jsonl";

/// Emissions per scene from the trained tracker.
pub fn track_all(cfg: &RunConfig, store: &ParamStore, scenes: &[Scene]) -> CliResult<Vec<Vec<Emission>>> {
    let coder = BoxCoder::from_sim(&cfg.sim);
    scenes
        .iter()
        .map(|s| Ok(track_scene(s, store, &cfg.model, &coder, &cfg.lifecycle)?))
        .collect()
}

/// Ground truth replayed as emissions with score 1: the ideal tracker.
pub fn oracle_emissions(scene: &Scene) -> Vec<Emission> {
    scene
        .frames
        .iter()
        .flat_map(|f| {
            f.targets.iter().map(move |g| Emission {
                t: f.t,
                id: g.id,
                class: g.class_id,
                score: 1.0,
                bbox: [
                    g.center[0],
                    g.center[1],
                    g.center[2],
                    g.size[0],
                    g.size[1],
                    g.size[2],
                    g.yaw,
                    g.velocity[0],
                    g.velocity[1],
                ],
            })
        })
        .collect()
}

pub fn summarize(cfg: &RunConfig, scenes: &[Scene], emissions: &[Vec<Emission>]) -> CliResult<TrackingSummary> {
    if scenes.len() != emissions.len() {
        return Err(CliError::Usage("one emission list per scene required".into()));
    }
    let boxes: Vec<Vec<TrackBox>> = emissions.iter().map(|e| e.iter().map(TrackBox::from).collect()).collect();
    let tracks: Vec<SceneTracks> = scenes
        .iter()
        .zip(&boxes)
        .map(|(s, b)| SceneTracks {
            frames: &s.frames,
            preds: b,
        })
        .collect();
    Ok(evaluate(&tracks, cfg.eval.d_match, cfg.eval.motar)?)
}

#[derive(Serialize)]
struct EmissionLine<'a> {
    scene: usize,
    #[serde(flatten)]
    emission: &'a Emission,
}

pub fn emissions_jsonl(emissions: &[Vec<Emission>]) -> String {
    let mut s = String::new();
    for (i, list) in emissions.iter().enumerate() {
        for e in list {
            let line = serde_json::to_string(&EmissionLine { scene: i, emission: e }).expect("emission serializes");
            let _ = writeln!(s, "{line}");
        }
    }
    s
}

/// Finds the run's config snapshot: next to the checkpoint or one level up.
pub fn find_config(checkpoint: &Path) -> CliResult<PathBuf> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    [dir.join(CONFIG_FILE), dir.join("..").join(CONFIG_FILE)]
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| CliError::Usage(format!("no {CONFIG_FILE} next to {}", checkpoint.display())))
}

/// Model parameters from a checkpoint, checked against the config's shapes.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> CliResult<ParamStore> {
    let mut store = init_store(cfg)?;
    load_into(&mut store, checkpoint)?;
    Ok(store)
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub summary: TrackingSummary,
    pub csv: PathBuf,
    pub emissions: PathBuf,
}

/// Tracks every scene in `scenes_dir` with the checkpointed model and
/// writes `summary.csv` and `emissions.jsonl` into `out`.
pub fn cmd_eval(checkpoint: &Path, scenes_dir: &Path, out: &Path) -> CliResult<EvalOutput> {
    let cfg = RunConfig::load(&find_config(checkpoint)?)?;
    let store = load_model(&cfg, checkpoint)?;
    let scenes = load_scene_dir(scenes_dir)?;
    let emissions = track_all(&cfg, &store, &scenes)?;
    write_eval(&cfg, &scenes, &emissions, out)
}

pub fn write_eval(cfg: &RunConfig, scenes: &[Scene], emissions: &[Vec<Emission>], out: &Path) -> CliResult<EvalOutput> {
    let summary = summarize(cfg, scenes, emissions)?;
    create_dir(out)?;
    let csv = out.join(SUMMARY_FILE);
    write_file(&csv, summary.to_csv().as_bytes())?;
    let em = out.join(EMISSIONS_FILE);
    write_file(&em, emissions_jsonl(emissions).as_bytes())?;
    Ok(EvalOutput {
        summary,
        csv,
        emissions: em,
    })
}
