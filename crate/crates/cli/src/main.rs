use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use sdprune_cli::{run, Command, ExperimentConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Sub {
    Train,
    PruneExact,
    ProxCheck,
    Connect,
    Contour,
    Theory,
}

/// Structured directional pruning experiments.
#[derive(Debug, Parser)]
#[command(name = "sdprune", version)]
struct Args {
    #[arg(value_enum)]
    command: Sub,
    /// JSON experiment config; optional for prox-check.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides outputs.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides run.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Config override, e.g. --set optimizer.c=0.2
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Ok(n) = std::env::var("SDPRUNE_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: SDPRUNE_THREADS must be a positive integer, got `{n}`");
                return ExitCode::from(2);
            }
        }
    }
    let command = match args.command {
        Sub::Train => Command::Train,
        Sub::PruneExact => Command::PruneExact,
        Sub::ProxCheck => Command::ProxCheck,
        Sub::Connect => Command::Connect,
        Sub::Contour => Command::Contour,
        Sub::Theory => Command::Theory,
    };
    let loaded = match &args.config {
        Some(path) => ExperimentConfig::load(path, &args.overrides, args.seed),
        None if matches!(command, Command::ProxCheck) => {
            ExperimentConfig::parse("{}", &args.overrides, args.seed)
        }
        None => {
            eprintln!("error: --config is required for {}", command.name());
            return ExitCode::from(2);
        }
    };
    let result = loaded.and_then(|(cfg, raw)| run(command, &cfg, &raw, args.out.as_deref()));
    match result {
        Ok(report) => {
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
