use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use erlqr_cli::output::write_json;
use erlqr_cli::{run, CliError, Command, ExperimentConfig};
use log::error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "erlqr", version, about = "Ergodic-risk constrained LQR experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Experiment config (JSON, schema "ergodic-risk/v1").
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Dotted config override, e.g. `--set solver.eps=1e-6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Primal-dual synthesis: solution.json, history.csv.
    Synthesize,
    /// Monte Carlo rollouts: curves.csv, rollouts.csv, summary.json.
    Simulate,
    /// Drift certificate and its Monte Carlo check: certificate.json, drift_report.json.
    Certify,
    /// Random instance: problem.json.
    Randgen,
    /// Cost and risk of several policies: compare.json.
    Compare,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Synthesize => Command::Synthesize,
            Cmd::Simulate => Command::Simulate,
            Cmd::Certify => Command::Certify,
            Cmd::Randgen => Command::Randgen,
            Cmd::Compare => Command::Compare,
        }
    }
}

fn init_threads() -> Result<usize, CliError> {
    if let Ok(v) = std::env::var("ERLQR_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::config(format!("ERLQR_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    Ok(rayon::current_num_threads())
}

fn unix_ms(t: SystemTime) -> u128 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cmd: Command = cli.command.into();
    let started = SystemTime::now();
    let clock = Instant::now();

    let cfg = init_threads().and_then(|threads| {
        let path = cli
            .config
            .as_deref()
            .ok_or_else(|| CliError::config("--config is required"))?;
        ExperimentConfig::load(path, &cli.overrides, cli.seed, cli.out.as_deref()).map(|c| (c, threads))
    });
    let (cfg, threads) = match cfg {
        Ok(v) => v,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };

    let result = run(cmd, &cfg);
    let code = result.as_ref().map_or_else(|e| e.exit_code(), |_| 0);
    if let Err(e) = &result {
        error!("{e}");
    }
    let meta = json!({
        "command": cmd.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": cli.config.as_ref().map(|p| p.display().to_string()),
        "seed": cfg.seed,
        "threads": threads,
        "started_unix_ms": unix_ms(started),
        "elapsed_ms": clock.elapsed().as_millis(),
        "exit_code": code,
        "status": result.as_ref().err().map(|e| e.to_string()),
    });
    if cfg.output_dir.is_dir() {
        if let Err(e) = write_json(&cfg.output_dir, "metadata.json", &meta) {
            error!("{e}");
        }
    }
    ExitCode::from(code as u8)
}
