use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use probekit::pipeline::{explain, run_stage, Precision, RunConfig, Stage};
use probekit::Error;

/// Staged probing pipeline: data, generators, detector, probing,
/// fine-tuning and evaluation.
#[derive(Debug, Parser)]
#[command(name = "probekit", version)]
struct Cli {
    /// TOML run configuration; defaults apply to missing sections and keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stage to run (`run-all` for the whole graph).
    #[arg(long, required_unless_present = "explain")]
    stage: Option<String>,
    /// Override the root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the number of probing rounds.
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
    /// Print the stage dependency graph and exit.
    #[arg(long)]
    explain: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Dependency { .. } => 3,
        Error::Numeric(_) | Error::Training { .. } => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    if cli.explain {
        print!("{}", explain());
        return Ok(());
    }
    let stage = Stage::parse(cli.stage.as_deref().unwrap_or_default())?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.io.out_dir = out;
    }
    if let Some(rounds) = cli.rounds {
        cfg.probe.rounds = rounds;
    }
    if let Some(p) = cli.precision {
        cfg.io.precision = p;
    }
    cfg.validate()?;
    let manifest = run_stage(&cfg, stage)?;
    println!(
        "{} {stage} done ({})",
        manifest.run_id,
        cfg.run_dir().display()
    );
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
