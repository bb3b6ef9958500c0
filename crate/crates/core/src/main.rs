use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use layerlab::runner::{
    emit_report, run_experiment, Command, ExperimentConfig, Format, RunError, EXIT_CONFIG,
};

#[derive(Parser)]
#[command(name = "layerlab", version, about = "Layer surgery, probing and similarity analysis for tabular ICL transformers")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Train a model from the config's training spec and save a checkpoint.
    Train(Opts),
    /// Skip, swap and repeat grids.
    Surgery(Opts),
    /// Probe transfer matrices.
    Probe(Opts),
    /// Cross-layer cosine similarity.
    Similarity(Opts),
    /// Per-layer early-exit AUC.
    EarlyExit(Opts),
    /// Every intervention listed in the config.
    Report(Opts),
}

#[derive(Args)]
struct Opts {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated subset of csv,json,svg; overrides `formats`.
    #[arg(long, value_delimiter = ',')]
    formats: Option<Vec<Format>>,
    /// Suppress progress messages.
    #[arg(long, short)]
    quiet: bool,
}

fn run(command: Command, opts: Opts) -> Result<i32, RunError> {
    let mut config = ExperimentConfig::load(&opts.config)?;
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    if let Some(out) = opts.out {
        config.out_dir = out;
    }
    if let Some(formats) = opts.formats {
        config.formats = formats;
    }
    let quiet = opts.quiet;
    let log = move |msg: &str| {
        if !quiet {
            eprintln!("layerlab: {msg}");
        }
    };
    let report = run_experiment(&config, command, &log)?;
    let files = emit_report(&report, &config.formats, &config.out_dir)?;
    log(&format!(
        "wrote {} files to {} ({} of {} cells completed, {:.1}s)",
        files.len(),
        config.out_dir.display(),
        report.completed_cells(),
        report.cells_total,
        report.elapsed_seconds
    ));
    for f in &report.failures {
        eprintln!("layerlab: failed {} / {}: {}", f.dataset, f.cell, f.error);
    }
    Ok(report.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    let (command, opts) = match cli.command {
        Sub::Train(o) => (Command::Train, o),
        Sub::Surgery(o) => (Command::Surgery, o),
        Sub::Probe(o) => (Command::Probe, o),
        Sub::Similarity(o) => (Command::Similarity, o),
        Sub::EarlyExit(o) => (Command::EarlyExit, o),
        Sub::Report(o) => (Command::Report, o),
    };
    match run(command, opts) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("layerlab: error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
