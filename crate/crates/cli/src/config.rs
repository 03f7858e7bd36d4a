//! Run configuration: one JSON document, validated before any work.

use std::path::{Path, PathBuf};

use hybridtrack::decoder::ModelConfig;
use hybridtrack::metrics::{MotarRecall, D_MATCH};
use hybridtrack::numcore::OptimConfig;
use hybridtrack::simworld::SimConfig;
use hybridtrack::tracker::{LifecycleConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_scenes: 100,
            eval_scenes: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub d_match: f64,
    pub motar: MotarRecall,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            d_match: D_MATCH,
            motar: MotarRecall::Achieved,
        }
    }
}

/// Everything a run needs. Unknown keys are rejected; missing keys take
/// the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lifecycle: LifecycleConfig,
    /// `total_steps` is overwritten per phase with that phase's step count.
    pub optim: OptimConfig,
    /// Frames per training clip.
    pub clip_len: usize,
    /// Optimizer steps on K-frame clips.
    pub steps: u64,
    /// Single-frame detection steps (all extra supervision off) run before
    /// clip training.
    pub pretrain_steps: u64,
    /// Optimizer of the single-frame phase.
    pub pretrain_optim: OptimConfig,
    /// Write a checkpoint every this many clip steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Seeds swept by `ablate`.
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sim: SimConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            lifecycle: LifecycleConfig::default(),
            optim: OptimConfig::default(),
            clip_len: 3,
            steps: 1000,
            pretrain_steps: 0,
            pretrain_optim: OptimConfig::default(),
            checkpoint_every: 0,
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Small desk-scale benchmark used by the ablation sweeps: a 50 m
    /// square, 8x8 tokens, at most 10 targets, three classes. A long
    /// single-frame warm-up trains the detector before clip training.
    pub fn bench() -> Self {
        let channels = 32;
        let classes = 3;
        RunConfig {
            sim: SimConfig {
                half_range: 25.0,
                grid: [8, 8],
                channels,
                num_classes: classes,
                num_frames: 12,
                initial_targets: [2, 6],
                max_targets: 10,
                ..SimConfig::default()
            },
            model: ModelConfig {
                channels,
                layers: 3,
                heads: 2,
                ffn_hidden: 2 * channels,
                num_object_queries: 16,
                num_classes: classes,
            },
            lifecycle: LifecycleConfig {
                spawn_threshold: 0.3,
                keep_threshold: 0.3,
                max_misses: 1,
                spawn_suppress_radius: 2.0,
                retire_out_of_range: true,
            },
            optim: OptimConfig {
                lr: 5e-4,
                ..OptimConfig::default()
            },
            pretrain_optim: OptimConfig {
                lr: 2e-3,
                ..OptimConfig::default()
            },
            steps: 4000,
            pretrain_steps: 40_000,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.sim.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.lifecycle.validate()?;
        self.optim.validate()?;
        self.pretrain_optim.validate()?;
        let fail = |m: String| Err(CliError::Config(m));
        if self.sim.channels != self.model.channels {
            return fail(format!(
                "token channels ({}) differ from model channels ({})",
                self.sim.channels, self.model.channels
            ));
        }
        if self.sim.num_classes != self.model.num_classes {
            return fail(format!(
                "simulated classes ({}) differ from model classes ({})",
                self.sim.num_classes, self.model.num_classes
            ));
        }
        if self.clip_len == 0 || self.clip_len > self.sim.num_frames {
            return fail(format!(
                "clip length {} must be in 1..={}",
                self.clip_len, self.sim.num_frames
            ));
        }
        if self.steps == 0 {
            return fail("steps must be positive".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        if !(self.eval.d_match > 0.0 && self.eval.d_match.is_finite()) {
            return fail(format!("d_match must be positive, got {}", self.eval.d_match));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub toggles: Vec<(Toggle, bool)>,
    pub clip_len: Option<usize>,
    pub tau: Option<f64>,
    pub match_k: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Toggle {
    O2m,
    O2o,
    Asso,
}

/// Parses `o2m=on`, `asso=off` and the like.
pub fn parse_toggle(s: &str) -> Result<(Toggle, bool), String> {
    let (name, value) = s.split_once('=').ok_or_else(|| format!("expected NAME=on|off, got {s:?}"))?;
    let t = match name {
        "o2m" => Toggle::O2m,
        "o2o" => Toggle::O2o,
        "asso" => Toggle::Asso,
        _ => return Err(format!("unknown toggle {name:?} (o2m, o2o, asso)")),
    };
    let on = match value {
        "on" => true,
        "off" => false,
        _ => return Err(format!("toggle value must be on or off, got {value:?}")),
    };
    Ok((t, on))
}

/// Parses an inclusive seed range `N..M` or a single seed.
pub fn parse_seed_range(s: &str) -> Result<Vec<u64>, String> {
    let bad = || format!("expected N..M or N, got {s:?}");
    match s.split_once("..") {
        Some((a, b)) => {
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            let b: u64 = b.trim().parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            Ok((a..=b).collect())
        }
        None => Ok(vec![s.trim().parse().map_err(|_| bad())?]),
    }
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> CliResult<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        for &(t, on) in &self.toggles {
            match t {
                Toggle::O2m => cfg.train.o2m = on,
                Toggle::O2o => cfg.train.o2o = on,
                Toggle::Asso => cfg.train.asso = on,
            }
        }
        if let Some(k) = self.clip_len {
            cfg.clip_len = k;
        }
        if let Some(t) = self.tau {
            cfg.train.assign.tau = t;
        }
        if let Some(k) = self.match_k {
            cfg.train.assign.k = k;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()
    }
}
