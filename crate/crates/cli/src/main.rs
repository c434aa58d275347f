mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fluent_slt::{Error, ErrorClass};

use crate::config::{RunConfig, SEED_ENV};

/// Translate disfluent speech features into fluent text.
#[derive(Debug, Parser)]
#[command(name = "fluent-slt", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// key=value configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.lr0=0.001`
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic disfluent/fluent corpus with rendered features
    SynthData {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compute normalized filterbank features for a manifest of WAV files
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for feature files (default: next to the output manifest)
        #[arg(long)]
        feat_dir: Option<PathBuf>,
    },
    /// Train a speech or monomt model
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a checkpoint written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode a manifest with a trained model, one output line per utterance
    Translate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        lennorm: Option<f64>,
        /// Greedy decoding instead of beam search
        #[arg(long)]
        greedy: bool,
    },
    /// Remove filler words and repetitions from text
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Filler lexicon, one word per line (default: built-in)
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        max_ngram: usize,
    },
    /// Rewrite disfluent text with a monomt model
    Postedit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score hypotheses against one or more reference files
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref", required = true)]
        refs: Vec<PathBuf>,
        #[arg(long)]
        metric: Option<String>,
        /// BLEU without the brevity penalty
        #[arg(long)]
        no_bp: bool,
        /// Average of scores against each reference file on its own
        #[arg(long)]
        single_ref_average: bool,
        #[arg(long)]
        json: bool,
    },
    /// Character-level diff of two line-aligned output files
    DiffReport {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// HTML output; a `.txt` rendering is written alongside
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_status(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

fn load_config(global: &Global) -> fluent_slt::Result<RunConfig> {
    let mut config = RunConfig::new(std::env::var(SEED_ENV).ok());
    if let Some(path) = &global.config {
        config.merge_file(path)?;
    }
    for pair in &global.overrides {
        config.set_pair(pair)?;
    }
    Ok(config)
}

pub fn run(args: impl IntoIterator<Item = OsString>) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = load_config(&cli.global).and_then(|config| commands::execute(cli.command, config));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fluent-slt: {e}");
            exit_status(&e)
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}
