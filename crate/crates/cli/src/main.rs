use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bce_core::config::RunConfig;
use bce_core::eval::{compare, summarize};
use bce_core::io;
use bce_core::pipeline::{run, Mode};
use bce_core::robust::StaticMixture;
use bce_core::scenario::generate;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "robust-bce", version, about = "Robust batch estimation with learned measurement uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file with [scenario], [pipeline] and [compare] sections
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario: observations.csv, truth.csv, labels.csv
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Overrides the scenario seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate a trajectory: trajectory.csv, trace.json
    Solve {
        #[command(flatten)]
        common: Common,
        /// l2, dcs, mm, bce or bce-ad
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Clustering seed
        #[arg(long)]
        seed: Option<u64>,
        /// Observation file; defaults to <out>/observations.csv
        #[arg(long)]
        observations: Option<PathBuf>,
        /// Static mixture JSON for mode mm
        #[arg(long)]
        mixture: Option<PathBuf>,
    },
    /// Summarize horizontal errors of an estimate against truth
    Eval {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
        /// Also write summary.csv here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every configured (mode, seed) pair and write the comparison tables
    Compare {
        #[command(flatten)]
        common: Common,
        /// Replaces the configured modes; repeatable
        #[arg(long, value_parser = parse_mode)]
        mode: Vec<Mode>,
        /// Replaces the configured seeds; repeatable
        #[arg(long)]
        seed: Vec<u64>,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

fn load(path: Option<&Path>) -> bce_core::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn execute(command: Command) -> bce_core::Result<ExitCode> {
    match command {
        Command::Simulate { common, seed } => {
            let mut cfg = load(common.config.as_deref())?;
            if let Some(s) = seed {
                cfg.scenario.seed = s;
            }
            let scenario = generate(&cfg.scenario)?;
            let dim = cfg.scenario.dim();
            io::write_observations(io::create(&common.out.join("observations.csv"))?, &scenario.observations, dim)?;
            io::write_trajectory(io::create(&common.out.join("truth.csv"))?, &scenario.truth)?;
            io::write_labels(io::create(&common.out.join("labels.csv"))?, &scenario.labels)?;
            println!("wrote {} observations over {} epochs to {}", scenario.observations.len(), scenario.truth.epochs(), common.out.display());
        }
        Command::Solve { common, mode, seed, observations, mixture } => {
            let mut cfg = load(common.config.as_deref())?;
            if let Some(m) = mode {
                cfg.pipeline.mode = m;
            }
            if let Some(s) = seed {
                cfg.pipeline.vb.seed = s;
            }
            if let Some(p) = mixture {
                cfg.pipeline.mixture = Some(StaticMixture::try_from(io::read_mixture(io::open(&p)?)?)?);
            }
            let obs_path = observations.unwrap_or_else(|| common.out.join("observations.csv"));
            let obs = io::read_observations(io::open(&obs_path)?)?;
            let result = run(&obs, &cfg.pipeline)?;
            io::write_trajectory(io::create(&common.out.join("trajectory.csv"))?, &result.trajectory)?;
            io::write_trace(io::create(&common.out.join("trace.json"))?, &result.trace)?;
            println!(
                "{}: {} outer iterations, final cost {}",
                cfg.pipeline.mode,
                result.trace.len(),
                result.trace.last().map_or(f64::NAN, |t| t.cost)
            );
        }
        Command::Eval { truth, trajectory, out } => {
            let truth = io::read_trajectory(io::open(&truth)?)?;
            let estimate = io::read_trajectory(io::open(&trajectory)?)?;
            let errors = bce_core::scenario::oracle_error(&truth, &estimate)?;
            let s = summarize(&errors)?;
            let text = format!("median,variance,max,count\n{},{},{},{}\n", s.median, s.variance, s.max, s.count);
            print!("{text}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("summary.csv"), text)?;
            }
        }
        Command::Compare { common, mode, seed } => {
            let mut cfg = load(common.config.as_deref())?;
            if !mode.is_empty() {
                cfg.compare.modes = mode;
            }
            if !seed.is_empty() {
                cfg.compare.seeds = seed;
            }
            let cmp = compare(&cfg, bce_core::par::thread_cap_from_env())?;
            cmp.write(&common.out)?;
            for &m in &cmp.manifest.modes {
                match cmp.median_of_medians(m) {
                    Ok(v) => println!("{m}: median of medians {v:.4} m"),
                    Err(_) => println!("{m}: no successful runs"),
                }
            }
            if cmp.failures() > 0 {
                eprintln!("{} run(s) failed; see summary.csv", cmp.failures());
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
