//! `dsdr`: data synthesis, training, evaluation, ablation and reporting.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exit code 2: usage or validation; 3: numerical failure; 4: I/O.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<dsdr_core::Error> for CliError {
    fn from(e: dsdr_core::Error) -> Self {
        use dsdr_core::Error as E;
        match e {
            E::Numerical(_) => CliError::Numerical(e.to_string()),
            E::Io { .. } | E::Image { .. } | E::Integrity { .. } => CliError::Io(e.to_string()),
            E::Shape(_) | E::Config(_) | E::Schema(_) | E::Format { .. } => CliError::Usage(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "dsdr", version, about = "Dual-stream disentangle-and-reconstruct domain generalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-domain digit dataset to disk.
    SynthData {
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
        domains: u64,
        #[arg(long)]
        per_domain: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on every domain but one.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        held_out: String,
        #[arg(long)]
        force: bool,
        /// Continue from the checkpoint in the output directory.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
    },
    /// Top-1 accuracy of a checkpoint on one domain.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory dataset to evaluate on.
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        data: Option<PathBuf>,
        /// Take the dataset from a config file instead.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        held_out: String,
        /// Results CSV to append to; defaults to results.csv beside the checkpoint.
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Leave-one-domain-out runs over every configured seed.
    Loo {
        #[arg(long)]
        config: PathBuf,
        /// Also run the ERM baseline.
        #[arg(long)]
        erm: bool,
        #[arg(long)]
        force: bool,
    },
    /// Loss-ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// `default` for the nine reference rows, or a rows file.
        #[arg(long, default_value = "default")]
        rows: String,
        #[arg(long)]
        force: bool,
    },
    /// Summary tables and loss curves for a results directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Print a config file with every key at its default.
    Template,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData {
            domains,
            per_domain,
            seed,
            classes,
            out,
            force,
        } => commands::synth_data(domains as usize, per_domain, seed, classes, &out, force),
        Command::Train {
            config,
            held_out,
            force,
            resume,
        } => commands::train(&config, &held_out, force, resume),
        Command::Eval {
            checkpoint,
            data,
            config,
            held_out,
            results,
        } => commands::eval(&checkpoint, data.as_deref(), config.as_deref(), &held_out, results.as_deref()),
        Command::Loo { config, erm, force } => commands::loo(&config, erm, force),
        Command::Ablate { config, rows, force } => commands::ablate(&config, &rows, force),
        Command::Report { dir } => commands::report(&dir),
        Command::Template => {
            print!("{}", config::ExperimentConfig::template());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
