//! `auscult`: respiratory sound classification pipeline.
//!
//! Subcommands wire the library end to end: `ingest` labels raw
//! recordings, `featurize` turns them into fixed-size normalized Mel
//! spectrograms, `experiment` runs a cross-validated balancing
//! configuration, `report` consolidates result files.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

/// Exit codes: 0 success, 1 user error, 2 data error, 3 internal error.
#[derive(Debug)]
pub enum CliError {
    User(String),
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            Self::User(_) => 1,
            Self::Data(_) => 2,
            Self::Internal(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::User(m) => write!(f, "error: {m}"),
            Self::Data(m) => write!(f, "data error: {m}"),
            Self::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "auscult",
    version,
    about = "Respiratory sound classification: Mel spectrograms, imbalance correction, CNN, cross-validated metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label a directory of recordings against a diagnosis table and
    /// write the dataset manifest.
    Ingest {
        /// Directory of .wav recordings named {patient}_{index}_{location}_{mode}_{equipment}.wav
        /// (falls back to [paths].audio_dir)
        #[arg(long)]
        audio_dir: Option<PathBuf>,
        /// Delimited patient_id,diagnosis table, comma or tab separated
        /// (falls back to [paths].diagnoses)
        #[arg(long)]
        diagnoses: Option<PathBuf>,
        /// Label scheme: ternary | six [default: ternary]
        #[arg(long)]
        scheme: Option<String>,
        /// Manifest CSV to write
        #[arg(long)]
        out: PathBuf,
        /// Configuration file (its [run].scheme is used unless --scheme is given)
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compute Mel spectrograms for every manifest row, resize all of
    /// them to the mean column count, normalize and write MELSPEC files.
    Featurize {
        /// Manifest written by `ingest`
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding the .wav files listed in the manifest
        /// (falls back to [paths].audio_dir)
        #[arg(long)]
        audio_dir: Option<PathBuf>,
        /// Output directory for .msp files and the manifest copy
        /// (falls back to [paths].work_dir/features)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Configuration file ([melspec] section supplies defaults)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Target sample rate in Hz [default: 22050]
        #[arg(long)]
        sample_rate: Option<u32>,
        /// STFT window size in samples [default: 2048]
        #[arg(long)]
        window: Option<usize>,
        /// Hop between frames in samples [default: 512]
        #[arg(long)]
        hop: Option<usize>,
        /// Number of Mel bands [default: 128]
        #[arg(long)]
        n_mels: Option<usize>,
        /// Lowest filterbank frequency in Hz [default: 0]
        #[arg(long)]
        fmin: Option<f64>,
        /// Highest filterbank frequency in Hz [default: 11025]
        #[arg(long)]
        fmax: Option<f64>,
    },
    /// Run one balancing configuration under k-fold cross-validation and
    /// write the result file plus per-fold confusion matrices.
    Experiment {
        /// Directory produced by `featurize` (manifest.csv + .msp files;
        /// falls back to [paths].work_dir/features)
        #[arg(long)]
        features: Option<PathBuf>,
        /// Output directory for result and confusion files
        /// (falls back to [paths].work_dir/results)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Configuration file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Balancing method: none | weights | smote | adasyn | vae [default: none]
        #[arg(long)]
        method: Option<String>,
        /// Expected label scheme; must match the manifest when given
        #[arg(long)]
        scheme: Option<String>,
        /// Evaluation protocol: default (balance inside folds) | paper (balance first) [default: default]
        #[arg(long)]
        protocol: Option<String>,
        /// Global random seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Number of cross-validation folds [default: 10]
        #[arg(long)]
        folds: Option<usize>,
        /// Worker threads for fold-level parallelism; results are
        /// independent of this value [default: 1]
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Consolidate result files into one comparison table.
    Report {
        /// Directory holding experiment result .json files
        #[arg(long)]
        results_dir: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Ingest {
            audio_dir,
            diagnoses,
            scheme,
            out,
            config,
        } => commands::ingest(
            audio_dir.as_deref(),
            diagnoses.as_deref(),
            scheme.as_deref(),
            &out,
            config.as_deref(),
        ),
        Command::Featurize {
            manifest,
            audio_dir,
            out,
            config,
            sample_rate,
            window,
            hop,
            n_mels,
            fmin,
            fmax,
        } => commands::featurize(commands::FeaturizeArgs {
            manifest: &manifest,
            audio_dir: audio_dir.as_deref(),
            out: out.as_deref(),
            config: config.as_deref(),
            sample_rate,
            window,
            hop,
            n_mels,
            fmin,
            fmax,
        }),
        Command::Experiment {
            features,
            out,
            config,
            method,
            scheme,
            protocol,
            seed,
            folds,
            jobs,
        } => commands::experiment(commands::ExperimentArgs {
            features: features.as_deref(),
            out: out.as_deref(),
            config: config.as_deref(),
            method,
            scheme,
            protocol,
            seed,
            folds,
            jobs,
        }),
        Command::Report { results_dir } => commands::report(&results_dir),
    };
    if let Err(e) = result {
        eprintln!("{e}");
        std::process::exit(e.code());
    }
}
