//! Experiment harness around the `hybridtrack` library: scene generation,
//! training, evaluation, gradient checks and ablation sweeps.

pub mod ablate;
pub mod config;
pub mod eval;
pub mod train;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use hybridtrack::encoding::split_seed;
use hybridtrack::gradcheck::{self, CheckResult, GradCheckOptions};
use hybridtrack::simworld::{check_scene, generate_scene, save_scene, Scene, SimConfig};

pub use config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),

    /// NaN/inf during training or a failed gradient check.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] hybridtrack::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for usage and config problems, 2 for numeric ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) | CliError::Core(hybridtrack::Error::NonFinite { .. }) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    Ok(hybridtrack::numcore::write_atomic(path, bytes)?)
}

/// Seed of the `i`-th scene generated from `base`.
pub fn scene_seed(base: u64, i: usize) -> u64 {
    split_seed(base, &format!("scene/{i}"))
}

/// Generates `count` scenes in memory.
pub fn generate_scenes(sim: &SimConfig, base: u64, count: usize) -> CliResult<Vec<Scene>> {
    (0..count)
        .map(|i| Ok(generate_scene(sim, scene_seed(base, i))?))
        .collect()
}

/// Writes `count` scenes as `scene_0000.json`, ... into `out`. Every scene
/// passes the structural checks before it is written.
pub fn cmd_simulate(cfg: &RunConfig, count: usize, out: &Path) -> CliResult<Vec<PathBuf>> {
    cfg.validate()?;
    create_dir(out)?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let scene = generate_scene(&cfg.sim, scene_seed(cfg.seed, i))?;
        check_scene(&scene)?;
        let path = out.join(format!("scene_{i:04}.json"));
        save_scene(&scene, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub results: Vec<CheckResult>,
    pub elapsed: Duration,
}

impl GradCheckReport {
    pub fn failures(&self) -> Vec<&CheckResult> {
        self.results.iter().filter(|r| !r.passed()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            s.push_str(&format!(
                "{} {} rel_error={:.3e} tol={:.0e}\n",
                if r.passed() { "ok  " } else { "FAIL" },
                r.name,
                r.rel_error,
                r.tolerance
            ));
        }
        s.push_str(&format!(
            "{} checks, {} failed, {:.1} s\n",
            self.results.len(),
            self.failures().len(),
            self.elapsed.as_secs_f64()
        ));
        s
    }
}

/// Runs every finite-difference suite. `corrupt` names one check whose
/// analytic gradient is deliberately distorted.
pub fn cmd_gradcheck(corrupt: Option<&str>) -> CliResult<GradCheckReport> {
    let start = Instant::now();
    let opts = GradCheckOptions {
        corrupt: corrupt.map(str::to_string),
    };
    let results = gradcheck::run_all(&opts)?;
    Ok(GradCheckReport {
        results,
        elapsed: start.elapsed(),
    })
}
