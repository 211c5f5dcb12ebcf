use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cefl::config::RunConfig;
use cefl::harness::{comparison, comparison_text, execute};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cefl",
    version,
    about = "Clustered federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured protocol and seed, writing metrics and ledgers.
    Run {
        config: PathBuf,
        /// Replace the configured seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Write outputs here instead of the configured output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Check a configuration and report every violation without running it.
    Validate { config: PathBuf },
}

fn run(
    config: PathBuf,
    seed_override: Option<u64>,
    out_dir: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(&config)?;
    if let Some(seed) = seed_override {
        cfg.seeds = vec![seed];
    }
    let out = out_dir.unwrap_or_else(|| cfg.base_dir.join(&cfg.output_dir));
    let (records, _) =
        execute(&cfg, &out).with_context(|| format!("running {}", config.display()))?;
    print!("{}", comparison_text(&comparison(&records)));
    println!("outputs written to {}", out.display());
    Ok(())
}

fn validate(config: PathBuf) -> anyhow::Result<bool> {
    let cfg = RunConfig::load(&config)?;
    let diagnostics = cfg.diagnostics();
    for d in &diagnostics {
        eprintln!("{}: {d}", config.display());
    }
    if diagnostics.is_empty() {
        println!("{}: ok", config.display());
    }
    Ok(diagnostics.is_empty())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            seed_override,
            out_dir,
        } => run(config, seed_override, out_dir).map(|()| true),
        Command::Validate { config } => validate(config),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
