use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hybridtrack_cli::ablate::{cmd_ablate, Grid};
use hybridtrack_cli::config::{parse_seed_range, parse_toggle, Toggle};
use hybridtrack_cli::eval::cmd_eval;
use hybridtrack_cli::train::cmd_train;
use hybridtrack_cli::{cmd_gradcheck, cmd_simulate, CliError, CliResult, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "hybridtrack", version, about = "Query-based 3D multi-object tracking on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded scene files.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Train on a scene directory and write a run directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        scenes: PathBuf,
    },
    /// Track held-out scenes with a checkpoint and write the metric summary.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep supervision / assignment / clip-length variants over seeds.
    /// Expects `train/` and `eval/` below the scene directory.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        scenes: PathBuf,
        /// supervision, assignment, clip-length or all; repeatable.
        #[arg(long, default_value = "supervision")]
        grid: Vec<String>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Distort the analytic gradient of the named check.
        #[arg(long)]
        corrupt: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Bench,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config; built-in preset when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default", conflicts_with = "config")]
    preset: Preset,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Inclusive range `N..M`, or a single seed.
    #[arg(long)]
    seeds: Option<String>,
    /// `o2m|o2o|asso=on|off`, repeatable.
    #[arg(long, value_parser = parse_toggle)]
    toggle: Vec<(Toggle, bool)>,
    /// Clip length.
    #[arg(long)]
    k: Option<usize>,
    /// Matching-cost filter of the one-to-many assignment.
    #[arg(long)]
    tau: Option<f64>,
    /// Queries per ground truth in the one-to-many assignment.
    #[arg(long)]
    match_k: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => match self.preset {
                Preset::Default => RunConfig::default(),
                Preset::Bench => RunConfig::bench(),
            },
        };
        Overrides {
            seed: self.seed,
            seeds: self.seeds.as_deref().map(parse_seed_range).transpose().map_err(CliError::Usage)?,
            toggles: self.toggle.clone(),
            clip_len: self.k,
            tau: self.tau,
            match_k: self.match_k,
            out: self.out.clone(),
        }
        .apply(&mut cfg)?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate { run, count } => {
            let cfg = run.resolve()?;
            let paths = cmd_simulate(&cfg, count, &cfg.out_dir)?;
            println!("wrote {} scenes to {}", paths.len(), cfg.out_dir.display());
        }
        Command::Train { run, scenes } => {
            let cfg = run.resolve()?;
            let art = cmd_train(&cfg, &scenes, &cfg.out_dir)?;
            println!("checkpoint {}", art.checkpoint.display());
        }
        Command::Eval { checkpoint, scenes, out } => {
            let res = cmd_eval(&checkpoint, &scenes, &out)?;
            print!("{}", res.summary.to_csv());
        }
        Command::Ablate { run, scenes, grid } => {
            let cfg = run.resolve()?;
            let mut grids: Vec<Grid> = Vec::new();
            for g in &grid {
                for x in Grid::parse(g).map_err(CliError::Usage)? {
                    if !grids.contains(&x) {
                        grids.push(x);
                    }
                }
            }
            let table = cmd_ablate(&cfg, &grids, &scenes, &cfg.out_dir, |c| {
                eprintln!(
                    "{} {:>2} {:<34} seed {:<3} AMOTA {:.4} ({:.0} s)",
                    c.grid.name(),
                    c.index,
                    c.label,
                    c.seed,
                    c.summary.amota,
                    c.seconds
                );
            })?;
            print!("{}", table.median_csv());
        }
        Command::Gradcheck { corrupt } => {
            let report = cmd_gradcheck(corrupt.as_deref())?;
            print!("{}", report.to_text());
            let failed = report.failures().len();
            if failed > 0 {
                return Err(CliError::Numeric(format!("{failed} gradient checks failed")));
            }
        }
    }
    Ok(())
}

fn exit_with(code: i32) -> ExitCode {
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return exit_with(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_with(e.exit_code())
        }
    }
}
