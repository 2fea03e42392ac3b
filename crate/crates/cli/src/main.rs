//! Operator surface for the experiment grid: train single or
//! meta-embedding classifiers, train and fuse prediction ensembles,
//! inspect data and embedding files, predict, and self-check the math.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error,
//! 3 training failure (non-finite loss).

mod config;
mod predict;
mod runner;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ConfigDraft;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Training(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Training(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Training(m) => m,
        }
    }
}

impl From<embercast_core::data::DataError> for CliError {
    fn from(e: embercast_core::data::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<embercast_core::embeddings::EmbeddingError> for CliError {
    fn from(e: embercast_core::embeddings::EmbeddingError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<embercast_core::train::TrainError> for CliError {
    fn from(e: embercast_core::train::TrainError) -> Self {
        use embercast_core::tensor::TensorError;
        use embercast_core::train::TrainError;
        match e {
            TrainError::Tensor(TensorError::NonFinite { .. }) => {
                CliError::Training(format!("training diverged: {e}"))
            }
            TrainError::Tensor(_) => CliError::Config(e.to_string()),
            TrainError::TooFewExamples { .. }
            | TrainError::EmptyTrainSet
            | TrainError::EmptyTestSet
            | TrainError::MissingLabel { .. } => CliError::Data(e.to_string()),
            TrainError::Report { .. } | TrainError::Io(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<embercast_core::nets::CheckpointError> for CliError {
    fn from(e: embercast_core::nets::CheckpointError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<embercast_core::ensemble::EnsembleError> for CliError {
    fn from(e: embercast_core::ensemble::EnsembleError) -> Self {
        use embercast_core::ensemble::EnsembleError;
        match e {
            EnsembleError::Member(inner) => CliError::Training(inner.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "embercast", version, about = "Relevance classification for disaster-event posts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect word-vector files
    Embeddings {
        #[command(subcommand)]
        command: EmbeddingsCommand,
    },
    /// Inspect labeled datasets
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Train one classifier (single-source or meta-embedding scheme)
    Train(RunArgs),
    /// Train three per-source classifiers and fuse their predictions
    Ensemble(RunArgs),
    /// Classify posts with a checkpoint or an ensemble manifest
    Predict(predict::PredictArgs),
    /// Run the built-in numeric checks
    Selftest,
}

#[derive(Subcommand)]
enum EmbeddingsCommand {
    /// Print name, vocabulary size, dimension, and duplicate count
    Info {
        file: PathBuf,
        /// Source label; defaults to the file stem
        #[arg(long)]
        name: Option<String>,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Print class counts for a labeled TSV file
    Stats {
        file: PathBuf,
        /// Skip malformed rows (counted) instead of rejecting the file
        #[arg(long)]
        lenient: bool,
    },
}

/// Flags shared by `train` and `ensemble`. Unset flags fall back to the
/// config file (--config or $EMBERCAST_CONFIG), then to defaults.
#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// Config file with key = value lines; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scheme: T1..T3+L1|L2, M(T1+T2+T3)+L1|L2, E({T1+T2+T3}+L1|L2)
    #[arg(long)]
    scheme: Option<String>,
    /// Labeled TSV dataset
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints and reports
    #[arg(long)]
    out: Option<PathBuf>,
    /// GloVe-format embedding file (T1)
    #[arg(long)]
    glove: Option<PathBuf>,
    /// FastText embedding file (T2)
    #[arg(long)]
    fasttext: Option<PathBuf>,
    /// Crisis embedding file (T3)
    #[arg(long)]
    crisis: Option<PathBuf>,
    /// Stopword file (one token per line); defaults to the built-in list
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Recurrent hidden size per direction
    #[arg(long)]
    hidden: Option<usize>,
    /// Width of the two fully-connected layers
    #[arg(long)]
    dense: Option<usize>,
    /// Dropout on embedded token rows
    #[arg(long)]
    dropout_embed: Option<f64>,
    /// Variational dropout on recurrent input and state
    #[arg(long)]
    dropout_recurrent: Option<f64>,
    /// Dropout after each fully-connected layer
    #[arg(long)]
    dropout_dense: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Early-stopping patience in epochs; 0 disables early stopping
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Encoded sequence length
    #[arg(long)]
    max_len: Option<usize>,
    /// Ensemble weights: paper_fixed, uniform, val_proportional, or w1,w2,w3
    #[arg(long)]
    weights: Option<String>,
    /// Skip malformed dataset rows instead of rejecting the file
    #[arg(long)]
    lenient: bool,
}

impl RunArgs {
    fn into_draft(self) -> ConfigDraft {
        ConfigDraft {
            scheme: self.scheme,
            data: self.data,
            out_dir: self.out,
            glove: self.glove,
            fasttext: self.fasttext,
            crisis: self.crisis,
            stopwords: self.stopwords,
            hidden: self.hidden,
            dense: self.dense,
            dropout_embed: self.dropout_embed,
            dropout_recurrent: self.dropout_recurrent,
            dropout_dense: self.dropout_dense,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            patience: self.patience,
            val_fraction: self.val_fraction,
            test_fraction: self.test_fraction,
            seed: self.seed,
            max_len: self.max_len,
            weights: self.weights,
            lenient: if self.lenient { Some(true) } else { None },
        }
    }
}

/// Resolve flags over the config file named by --config or the
/// EMBERCAST_CONFIG environment variable.
fn resolve_run_config(args: RunArgs) -> CliResult<config::RunConfig> {
    let config_path = args
        .config
        .clone()
        .or_else(|| std::env::var_os("EMBERCAST_CONFIG").map(PathBuf::from));
    let base = match config_path {
        Some(path) => ConfigDraft::from_file(&path)?,
        None => ConfigDraft::default(),
    };
    base.overlaid(args.into_draft()).resolve()
}

fn cmd_embeddings_info(file: &PathBuf, name: Option<String>) -> CliResult<()> {
    let label = name.unwrap_or_else(|| {
        file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "embedding".into())
    });
    let reader = std::io::BufReader::new(
        std::fs::File::open(file)
            .map_err(|e| CliError::Config(format!("cannot open {}: {e}", file.display())))?,
    );
    let wv = embercast_core::embeddings::WordVectors::parse(reader, &label)?;
    println!("name = {}", wv.name());
    println!("n = {}", wv.len());
    println!("dim = {}", wv.dim());
    println!("duplicates = {}", wv.duplicates());
    Ok(())
}

fn cmd_data_stats(file: &PathBuf, lenient: bool) -> CliResult<()> {
    let reader = std::io::BufReader::new(
        std::fs::File::open(file)
            .map_err(|e| CliError::Config(format!("cannot open {}: {e}", file.display())))?,
    );
    let event = file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let (dataset, skipped) = if lenient {
        let outcome = embercast_core::data::load_tsv_lenient(reader, &event)?;
        (outcome.dataset, Some(outcome.skipped))
    } else {
        (embercast_core::data::load_tsv(reader, &event)?, None)
    };
    let (informative, not_informative) = dataset.stats();
    println!("event = {}", dataset.event_name);
    println!("posts = {}", dataset.len());
    println!("informative = {informative}");
    println!("not_informative = {not_informative}");
    if let Some(skipped) = skipped {
        println!("skipped = {skipped}");
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Embeddings { command: EmbeddingsCommand::Info { file, name } } => {
            cmd_embeddings_info(&file, name)
        }
        Command::Data { command: DataCommand::Stats { file, lenient } } => {
            cmd_data_stats(&file, lenient)
        }
        Command::Train(args) => {
            let config = resolve_run_config(args)?;
            if config.scheme.is_ensemble() {
                return Err(CliError::Config(format!(
                    "scheme {} is an ensemble scheme; use `embercast ensemble`",
                    config.scheme
                )));
            }
            runner::cmd_train(&config)
        }
        Command::Ensemble(args) => {
            let config = resolve_run_config(args)?;
            if !config.scheme.is_ensemble() {
                return Err(CliError::Config(format!(
                    "scheme {} is not an ensemble scheme; use `embercast train`",
                    config.scheme
                )));
            }
            runner::cmd_ensemble(&config)
        }
        Command::Predict(args) => predict::cmd_predict(args),
        Command::Selftest => selftest::cmd_selftest(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1, // usage problems are configuration errors
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}
