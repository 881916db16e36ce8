use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use playroom::config::Config;
use playroom::explorer::{self, Method, RunOptions};
use playroom::harness;

/// Change-driven exploration in a simulated play kitchen.
#[derive(Debug, Parser)]
#[command(name = "playroom", version)]
struct Cli {
    /// TOML config; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one exploration session into a fresh run directory.
    Explore(ExploreArgs),
    /// Goal-reaching trials on a finished run.
    Achieve(AchieveArgs),
    /// Every method, task and seed listed in the config, then plots and tables.
    Benchmark(BenchmarkArgs),
    /// Summarise a run directory.
    Inspect { run: PathBuf },
    /// Cumulative-success plot of a run, or the report of a benchmark directory.
    Plot { dir: PathBuf },
}

#[derive(Debug, Args)]
struct ExploreArgs {
    #[arg(long, default_value = "alan")]
    method: String,
    #[arg(long, default_value = "door")]
    task: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AchieveArgs {
    run: PathBuf,
    /// Defaults to the run's own task.
    #[arg(long)]
    task: Option<String>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory for the results CSV; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchmarkArgs {
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&Path>) -> playroom::Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Explore(a) => {
            let method: Method = a.method.parse()?;
            let out = explorer::run(
                &cfg,
                &RunOptions {
                    method,
                    task: a.task,
                    seed: a.seed,
                    out_dir: Some(a.out.clone()),
                },
            )?;
            println!(
                "{} episodes, {} coincidental successes; run written to {}",
                out.metrics.len(),
                out.summary.cumulative_successes,
                a.out.display()
            );
        }
        Command::Achieve(a) => {
            let report = harness::achieve_run(&cfg, &a.run, a.task.as_deref(), a.seed)?;
            let dir = a.out.unwrap_or_else(|| a.run.clone());
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(harness::ACHIEVE_FILE);
            std::fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            println!("success rate {:.2}; results in {}", report.success_rate(), path.display());
        }
        Command::Benchmark(a) => {
            let report = harness::run_benchmark(&cfg, &a.out)?;
            print!("{}", std::fs::read_to_string(a.out.join(harness::REPORT_FILE))?);
            if !report.failures.is_empty() {
                for (task, method, seed, msg) in &report.failures {
                    eprintln!("failed: {task}/{method}/seed {seed}: {msg}");
                }
                anyhow::bail!("{} runs failed", report.failures.len());
            }
        }
        Command::Inspect { run } => print!("{}", harness::inspect(&run)?),
        Command::Plot { dir } => {
            if dir.join("runs").is_dir() {
                let bench_cfg = match cli.config {
                    Some(_) => cfg,
                    None => Config::load(&dir.join("config.toml"))?,
                };
                let report = harness::aggregate(&bench_cfg, &dir)?;
                for p in &report.plots {
                    println!("{}", p.display());
                }
            } else {
                println!("{}", harness::plot_run(&dir)?.display());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<playroom::Error>() {
        Some(e) if e.is_config() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
