//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (the run's manifest is
//! left with status `failed`), 2 on a configuration or usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{preset, with_mode, RunConfig};
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::metrics;
use crate::trainer::{run, Mode};

pub const SEED_ENV: &str = "COPLANNER_SEED";

#[derive(Debug, Parser)]
#[command(name = "coplanner", version, about = "Model-based RL with uncertainty-aware planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one run.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides COPLANNER_SEED and the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One run per (mode, seed) under `<out>/<mode>/seed_<n>`.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "full,explore_only,rollout_only,baseline")]
        modes: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One run per (value, seed) under `<out>/<param>=<value>/seed_<n>`.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `alpha_o`, `alpha_c`, `K`, `H_p`, or any dotted config path.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate every run under a directory into a learning-curve CSV.
    PlotData {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a run's metrics.jsonl to CSV.
    ExportCsv {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a preset configuration (`desk` or `table1`).
    Preset {
        #[arg(long)]
        name: String,
        #[arg(long)]
        env: String,
    },
}

/// Seed precedence: flag, then `COPLANNER_SEED`, then the config, then 0.
pub fn resolve_seed(flag: Option<u64>, env_value: Option<&str>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(v) = env_value {
        return v
            .trim()
            .parse()
            .map_err(|_| Error::config(SEED_ENV, format!("not an unsigned integer: `{v}`")));
    }
    Ok(config.unwrap_or(0))
}

fn sweep_path(param: &str) -> String {
    match param {
        "alpha_o" | "alpha_c" | "K" | "H_p" => format!("planner.{param}"),
        other => other.to_string(),
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

fn run_one(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let summary = run(cfg, seed, out)?;
    println!(
        "{}: final eval {:.3} +/- {:.3} ({} records)",
        out.display(),
        summary.final_eval.mean,
        summary.final_eval.std,
        summary.records
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let cfg = RunConfig::load(&config)?;
            let env_seed = std::env::var(SEED_ENV).ok();
            let seed = resolve_seed(seed, env_seed.as_deref(), cfg.seed)?;
            run_one(&cfg, seed, &out)
        }
        Command::Ablate {
            config,
            modes,
            seeds,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let modes = modes
                .iter()
                .map(|m| m.parse::<Mode>().map_err(|e| Error::config("--modes", e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            for mode in modes {
                let c = with_mode(&cfg, mode);
                for &seed in &seeds {
                    run_one(&c, seed, &out.join(mode.name()).join(format!("seed_{seed}")))?;
                }
            }
            Ok(())
        }
        Command::Sweep {
            config,
            param,
            values,
            seeds,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let path = sweep_path(&param);
            let variants = values
                .iter()
                .map(|v| Ok((v, cfg.with_override(&path, v)?)))
                .collect::<Result<Vec<_>>>()?;
            for (v, c) in variants {
                for &seed in &seeds {
                    run_one(&c, seed, &out.join(format!("{param}={v}")).join(format!("seed_{seed}")))?;
                }
            }
            Ok(())
        }
        Command::PlotData { input, out } => {
            let file = std::fs::File::create(&out)?;
            let points = metrics::plot_data(&input, file)?;
            println!("{}: {} rows", out.display(), points.len());
            Ok(())
        }
        Command::ExportCsv { input, out } => {
            let records = metrics::read_metrics(&input)?;
            metrics::export_csv(&records, std::fs::File::create(&out)?)
        }
        Command::Preset { name, env } => {
            let env: EnvKind = env.parse().map_err(|e: Error| Error::config("--env", e.to_string()))?;
            let cfg = preset(&name, env).map_err(|e| Error::config("--name", e.to_string()))?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
