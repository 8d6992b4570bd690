//! Command-line driver for the low-rank Kalman-Bucy filters.

mod compare;
mod config;
mod error;
mod output;
mod presets;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "lowrank-kbp", version, about = "Full-order and dynamical low-rank Kalman-Bucy filters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a study from a TOML file or a preset name.
    Run {
        config: String,
        /// Overrides the configured master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for replicates (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Parent directory of the run directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Write into `<output>/<name>` and replace a previous run there.
        #[arg(long)]
        force: bool,
        /// Also write final modes, coefficients and means of reduced filters.
        #[arg(long)]
        dump_modes: bool,
    },
    /// Column-wise maximum deviation between the CSV outputs of two runs.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        tolerance: f64,
    },
    /// Parse and check a configuration, then print it with defaults filled in.
    ValidateConfig { config: String },
    /// List the built-in presets.
    ListPresets,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// A file path if one exists, else a preset name. Returns the text and the
/// default run name.
fn load(config: &str) -> Result<(String, String)> {
    let path = Path::new(config);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let stem = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        return Ok((text, stem));
    }
    match presets::find(config) {
        Some(p) => Ok((p.toml.to_string(), p.name.to_string())),
        None => Err(CliError::Usage(format!("{config} is neither a file nor a preset (see list-presets)"))),
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run { config, seed, threads, output, force, dump_modes } => {
            let (text, stem) = load(&config)?;
            let mut cfg = RunConfig::from_toml(&text)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = output {
                cfg.output = o;
            }
            let cfg = cfg.resolve()?;
            if let Some(n) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
            }
            let name = cfg.name.clone().unwrap_or(stem);
            let dir = output::create_run_dir(&cfg.output, &name, force)?;
            run::execute(&cfg, &dir, run::RunOptions { dump_modes })?;
            println!("{}", dir.display());
            Ok(())
        }
        Command::Compare { a, b, tolerance } => {
            let report = compare::compare_runs(&a, &b)?;
            for d in &report.diffs {
                println!("{}\t{}\t{:e}", d.file.display(), d.column, d.max_abs);
            }
            for f in &report.unmatched {
                eprintln!("only in one run: {}", f.display());
            }
            for c in &report.skipped_columns {
                eprintln!("column on one side only: {c}");
            }
            println!("max\t{:e}", report.max_abs());
            let beyond = report.beyond(tolerance);
            if beyond.is_empty() {
                Ok(())
            } else {
                Err(CliError::BeyondTolerance { count: beyond.len(), tolerance })
            }
        }
        Command::ValidateConfig { config } => {
            let (text, _) = load(&config)?;
            let cfg = RunConfig::from_toml(&text)?.resolve()?;
            for w in cfg.warnings() {
                eprintln!("warning: {w}");
            }
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::ListPresets => {
            for p in presets::PRESETS {
                println!("{:<24}{}", p.name, p.description);
            }
            Ok(())
        }
    }
}
