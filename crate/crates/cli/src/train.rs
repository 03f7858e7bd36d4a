//! Training loop: optional single-frame warm-up, then one optimizer step
//! per sampled K-frame clip.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hybridtrack::decoder::BoxCoder;
use hybridtrack::encoding::rng_for;
use hybridtrack::loss::ClipLossReport;
use hybridtrack::numcore::{adamw_step, save_checkpoint, OptimConfig, OptimState, ParamStore};
use hybridtrack::simworld::{load_scene_dir, Scene};
use hybridtrack::tracker::{init_model, run_clip_training, TrainConfig};
use rand::Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{create_dir, write_file, CliError, CliResult};

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";

/// Fresh parameters for `cfg.model`, drawn from the run seed.
pub fn init_store(cfg: &RunConfig) -> CliResult<ParamStore> {
    let mut store = ParamStore::new();
    init_model(&mut store, &cfg.model, &mut rng_for(cfg.seed, "init"))?;
    Ok(store)
}

/// Loss terms that a config actually trains; the rest are structurally zero.
pub fn active_terms(t: &TrainConfig) -> Vec<&'static str> {
    let mut v = vec!["det_s"];
    if t.o2m {
        v.push("det_u");
    }
    v.push("track_s");
    if t.o2o {
        v.push("track_u");
    }
    if t.asso {
        v.push("asso");
    }
    v
}

/// Flat `step,frame,term,value` log.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    text: String,
}

impl TrainLog {
    pub fn new() -> Self {
        TrainLog {
            text: "step,frame,term,value\n".into(),
        }
    }

    fn record(&mut self, step: u64, terms: &[&str], report: &ClipLossReport) {
        for (f, ft) in report.frames.iter().enumerate() {
            for (name, v) in ft.named() {
                if terms.contains(&name) {
                    let _ = writeln!(self.text, "{step},{f},{name},{v}");
                }
            }
        }
        let _ = writeln!(self.text, "{step},all,total,{}", report.total);
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

#[derive(Serialize)]
struct NanDump<'a> {
    phase: &'a str,
    step: u64,
    scene_index: usize,
    scene_seed: u64,
    start: usize,
    len: usize,
    error: String,
    frames: &'a [hybridtrack::simworld::GroundTruthFrame],
}

/// Where a phase reports checkpoints and NaN dumps; `None` keeps it in memory.
struct Sink<'a> {
    dir: Option<&'a Path>,
    checkpoint_every: u64,
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    phase: &str,
    cfg: &RunConfig,
    optim: &OptimConfig,
    train: &TrainConfig,
    k: usize,
    steps: u64,
    scenes: &[Scene],
    store: &mut ParamStore,
    log: Option<&mut TrainLog>,
    sink: &Sink,
) -> CliResult<()> {
    let coder = BoxCoder::from_sim(&cfg.sim);
    let mut opt = OptimState::new(
        OptimConfig {
            total_steps: steps,
            ..optim.clone()
        },
        store,
    );
    let mut rng = rng_for(cfg.seed, &format!("clips/{phase}"));
    let terms = active_terms(train);
    let mut log = log;
    for step in 1..=steps {
        let si = rng.random_range(0..scenes.len());
        let scene = &scenes[si];
        let start = rng.random_range(0..=scene.frames.len() - k);
        store.zero_grads();
        let outcome = run_clip_training(store, &cfg.model, &coder, train, scene, start, k)
            .map_err(CliError::from)
            .and_then(|r| {
                if r.total.is_finite() {
                    Ok(r)
                } else {
                    Err(CliError::Numeric(format!("loss {} at {phase} step {step}", r.total)))
                }
            })
            .and_then(|r| adamw_step(store, &mut opt).map(|_| r).map_err(CliError::from));
        let report = match outcome {
            Ok(r) => r,
            Err(e) if e.exit_code() == 2 => {
                let msg = e.to_string();
                if let Some(dir) = sink.dir {
                    let dump = NanDump {
                        phase,
                        step,
                        scene_index: si,
                        scene_seed: scene.seed,
                        start,
                        len: k,
                        error: msg.clone(),
                        frames: &scene.frames[start..start + k],
                    };
                    let text = serde_json::to_string_pretty(&dump).expect("dump serializes");
                    write_file(&dir.join(NAN_DUMP_FILE), text.as_bytes())?;
                }
                return Err(CliError::Numeric(format!(
                    "{msg}; clip = scene {si} (seed {}) frames {start}..{}",
                    scene.seed,
                    start + k
                )));
            }
            Err(e) => return Err(e),
        };
        if let Some(l) = log.as_deref_mut() {
            l.record(step, &terms, &report);
        }
        if let Some(dir) = sink.dir {
            if sink.checkpoint_every > 0 && step % sink.checkpoint_every == 0 && step < steps {
                let ckpt_dir = dir.join("checkpoints");
                create_dir(&ckpt_dir)?;
                let ckpt = ckpt_dir.join(format!("{phase}_{step:06}.json"));
                save_checkpoint(store, &ckpt)?;
            }
        }
    }
    Ok(())
}

fn check_scenes(cfg: &RunConfig, scenes: &[Scene]) -> CliResult<()> {
    if scenes.is_empty() {
        return Err(CliError::Usage("no training scenes".into()));
    }
    for s in scenes {
        if s.frames.len() < cfg.clip_len {
            return Err(CliError::Usage(format!(
                "scene {} has {} frames, shorter than the clip length {}",
                s.seed,
                s.frames.len(),
                cfg.clip_len
            )));
        }
        if s.config.channels != cfg.model.channels || s.config.num_classes != cfg.model.num_classes {
            return Err(CliError::Usage(format!(
                "scene {} has {} channels / {} classes, model expects {} / {}",
                s.seed, s.config.channels, s.config.num_classes, cfg.model.channels, cfg.model.num_classes
            )));
        }
    }
    Ok(())
}

/// Single-frame detection warm-up from the run seed's initialization.
/// Depends only on the seed, sim, model, optimizer and step count, so
/// variants that share those may share the result.
pub fn pretrain(cfg: &RunConfig, scenes: &[Scene]) -> CliResult<ParamStore> {
    check_scenes(cfg, scenes)?;
    let mut store = init_store(cfg)?;
    let base = TrainConfig::baseline();
    run_phase("pretrain", cfg, &cfg.pretrain_optim, &base, 1, cfg.pretrain_steps, scenes, &mut store, None, &Sink {
        dir: None,
        checkpoint_every: 0,
    })?;
    Ok(store)
}

/// Clip training in memory starting from `init` (or the warm-up when `None`).
pub fn train_in_memory(cfg: &RunConfig, scenes: &[Scene], init: Option<ParamStore>) -> CliResult<(ParamStore, TrainLog)> {
    cfg.validate()?;
    check_scenes(cfg, scenes)?;
    let mut store = match init {
        Some(s) => s,
        None => pretrain(cfg, scenes)?,
    };
    let mut log = TrainLog::new();
    run_phase("clip", cfg, &cfg.optim, &cfg.train, cfg.clip_len, cfg.steps, scenes, &mut store, Some(&mut log), &Sink {
        dir: None,
        checkpoint_every: 0,
    })?;
    Ok((store, log))
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub log: PathBuf,
    pub checkpoint: PathBuf,
    pub intermediate: Vec<PathBuf>,
}

/// Trains on every scene in `scenes_dir` and writes the run directory:
/// config snapshot, loss log, intermediate and final checkpoints.
pub fn cmd_train(cfg: &RunConfig, scenes_dir: &Path, out: &Path) -> CliResult<RunArtifacts> {
    cfg.validate()?;
    let scenes = load_scene_dir(scenes_dir)?;
    train_scenes_to_dir(cfg, &scenes, out)
}

pub fn train_scenes_to_dir(cfg: &RunConfig, scenes: &[Scene], out: &Path) -> CliResult<RunArtifacts> {
    cfg.validate()?;
    check_scenes(cfg, scenes)?;
    create_dir(out)?;
    let config = out.join(CONFIG_FILE);
    write_file(&config, cfg.to_json().as_bytes())?;
    let sink = Sink {
        dir: Some(out),
        checkpoint_every: cfg.checkpoint_every,
    };
    let mut store = init_store(cfg)?;
    run_phase("pretrain", cfg, &cfg.pretrain_optim, &TrainConfig::baseline(), 1, cfg.pretrain_steps, scenes, &mut store, None, &sink)?;
    let mut log = TrainLog::new();
    let result = run_phase("clip", cfg, &cfg.optim, &cfg.train, cfg.clip_len, cfg.steps, scenes, &mut store, Some(&mut log), &sink);
    let log_path = out.join(LOG_FILE);
    write_file(&log_path, log.as_str().as_bytes())?;
    result?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    save_checkpoint(&store, &checkpoint)?;
    let mut intermediate: Vec<PathBuf> = match std::fs::read_dir(out.join("checkpoints")) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    intermediate.sort();
    Ok(RunArtifacts {
        dir: out.to_path_buf(),
        config,
        log: log_path,
        checkpoint,
        intermediate,
    })
}
