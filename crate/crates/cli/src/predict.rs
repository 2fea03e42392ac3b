//! Classify posts with a saved checkpoint or an ensemble manifest.
//!
//! Input is either `--text` for one post, or `--input` with a file:
//! a TSV with `tweet_id`/`tweet_text` columns (a `label` column is
//! ignored), or plain text with one post per line (ids are line
//! numbers). Output is one `id<TAB>label<TAB>p_informative` line per
//! post.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;

use embercast_core::embeddings::{EmbeddingSource, MetaSource, WordVectors};
use embercast_core::ensemble::{combine, EnsembleSpec};
use embercast_core::nets::{load_checkpoint, CheckpointMeta, Prediction, RecurrentClassifier};
use embercast_core::text::{encode, preprocess, PipelineConfig};

use crate::runner::{load_stopwords, load_word_vectors};
use crate::{CliError, CliResult};

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// A single-model checkpoint to run
    #[arg(long, conflicts_with = "manifest")]
    checkpoint: Option<PathBuf>,
    /// An ensemble manifest to run
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// GloVe-format embedding file
    #[arg(long)]
    glove: Option<PathBuf>,
    /// FastText embedding file
    #[arg(long)]
    fasttext: Option<PathBuf>,
    /// Crisis embedding file
    #[arg(long)]
    crisis: Option<PathBuf>,
    /// Stopword file; defaults to the built-in list
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// File of posts to classify
    #[arg(long, conflicts_with = "text")]
    input: Option<PathBuf>,
    /// One post given inline
    #[arg(long)]
    text: Option<String>,
}

struct SourceFiles {
    glove: Option<PathBuf>,
    fasttext: Option<PathBuf>,
    crisis: Option<PathBuf>,
}

impl SourceFiles {
    fn path(&self, label: &str) -> CliResult<&Path> {
        let path = match label {
            "glove" => &self.glove,
            "fasttext" => &self.fasttext,
            "crisis" => &self.crisis,
            other => {
                return Err(CliError::Config(format!("unknown source label {other:?}")));
            }
        };
        path.as_deref().ok_or_else(|| {
            CliError::Config(format!("checkpoint needs the {label} embedding file (--{label})"))
        })
    }

    /// Build the embedding source a checkpoint was trained against.
    fn source_for(&self, label: &str) -> CliResult<EmbeddingSource> {
        if label == "meta" {
            let members: Vec<Arc<WordVectors>> = ["glove", "fasttext", "crisis"]
                .iter()
                .map(|l| load_word_vectors(self.path(l)?, l))
                .collect::<CliResult<_>>()?;
            return Ok(EmbeddingSource::Meta(MetaSource::new(members)));
        }
        Ok(EmbeddingSource::Single(load_word_vectors(self.path(label)?, label)?))
    }
}

fn load_model(path: &Path) -> CliResult<(RecurrentClassifier, CheckpointMeta)> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
    Ok(load_checkpoint(BufReader::new(file))?)
}

fn check_dims(model: &RecurrentClassifier, source: &EmbeddingSource) -> CliResult<()> {
    if model.input_dim != source.dim() {
        return Err(CliError::Config(format!(
            "checkpoint for source {:?} expects dimension {}, but the embedding file has {}",
            model.source_name,
            model.input_dim,
            source.dim()
        )));
    }
    Ok(())
}

fn read_posts(args: &PredictArgs) -> CliResult<Vec<(String, String)>> {
    if let Some(text) = &args.text {
        return Ok(vec![("text".to_string(), text.clone())]);
    }
    let Some(path) = &args.input else {
        return Err(CliError::Config("predict needs --input FILE or --text STRING".into()));
    };
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        lines.push(line.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?);
    }

    // TSV when the first line names the id and text columns.
    if let Some(header) = lines.first() {
        let columns: Vec<&str> = header.split('\t').map(str::trim).collect();
        let id_col = columns.iter().position(|c| c.eq_ignore_ascii_case("tweet_id"));
        let text_col = columns.iter().position(|c| c.eq_ignore_ascii_case("tweet_text"));
        if let (Some(id_col), Some(text_col)) = (id_col, text_col) {
            let mut posts = Vec::new();
            for (idx, line) in lines.iter().enumerate().skip(1) {
                if line.is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != columns.len() {
                    return Err(CliError::Data(format!(
                        "{}: line {}: expected {} fields, found {}",
                        path.display(),
                        idx + 1,
                        columns.len(),
                        fields.len()
                    )));
                }
                posts.push((fields[id_col].to_string(), fields[text_col].to_string()));
            }
            return Ok(posts);
        }
    }

    Ok(lines
        .into_iter()
        .enumerate()
        .filter(|(_, line)| !line.is_empty())
        .map(|(idx, line)| ((idx + 1).to_string(), line))
        .collect())
}

pub fn cmd_predict(args: PredictArgs) -> CliResult<()> {
    let stopwords = load_stopwords(&args.stopwords)?;
    let files = SourceFiles {
        glove: args.glove.clone(),
        fasttext: args.fasttext.clone(),
        crisis: args.crisis.clone(),
    };
    let posts = read_posts(&args)?;

    enum Loaded {
        Single { model: Box<RecurrentClassifier>, source: EmbeddingSource, max_len: usize },
        Ensemble { members: Vec<(RecurrentClassifier, EmbeddingSource)>, weights: Vec<f64>, max_len: usize },
    }

    let loaded = if let Some(path) = &args.checkpoint {
        let (model, meta) = load_model(path)?;
        let source = files.source_for(&model.source_name)?;
        check_dims(&model, &source)?;
        Loaded::Single { model: Box::new(model), source, max_len: meta.max_len }
    } else if let Some(path) = &args.manifest {
        let file = std::fs::File::open(path)
            .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
        let spec = EnsembleSpec::read(BufReader::new(file))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut members = Vec::new();
        let mut max_len = None;
        for member in &spec.members {
            let ckpt_path = base.join(&member.checkpoint);
            let (model, meta) = load_model(&ckpt_path)?;
            let source = files.source_for(&member.label)?;
            check_dims(&model, &source)?;
            match max_len {
                None => max_len = Some(meta.max_len),
                Some(len) if len != meta.max_len => {
                    return Err(CliError::Config(format!(
                        "ensemble members disagree on max_len ({len} vs {})",
                        meta.max_len
                    )));
                }
                Some(_) => {}
            }
            members.push((model, source));
        }
        Loaded::Ensemble {
            members,
            weights: spec.weights(),
            max_len: max_len.ok_or_else(|| CliError::Config("manifest has no members".into()))?,
        }
    } else {
        return Err(CliError::Config("predict needs --checkpoint FILE or --manifest FILE".into()));
    };

    let max_len = match &loaded {
        Loaded::Single { max_len, .. } | Loaded::Ensemble { max_len, .. } => *max_len,
    };
    let pipe = PipelineConfig::new(stopwords, max_len);

    let classify = |text: &str| -> CliResult<Prediction> {
        match &loaded {
            Loaded::Single { model, source, .. } => Ok(model
                .classify_text(text, source, &pipe)
                .map_err(|e| CliError::Training(e.to_string()))?),
            Loaded::Ensemble { members, weights, .. } => {
                let tokens = preprocess(text, &pipe.stopwords);
                let mut preds = Vec::with_capacity(members.len());
                for (model, source) in members {
                    let seq = encode(&tokens, source, pipe.max_len);
                    let mut rng = embercast_core::rng::Rng::new(0);
                    preds.push(
                        model
                            .classify(&seq, false, &mut rng)
                            .map_err(|e| CliError::Training(e.to_string()))?,
                    );
                }
                Ok(combine(&preds, weights)?)
            }
        }
    };

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (id, text) in &posts {
        let pred = classify(text)?;
        use std::io::Write;
        writeln!(out, "{id}\t{}\t{:?}", pred.argmax().as_str(), pred.p_informative)
            .map_err(|e| CliError::Config(format!("cannot write output: {e}")))?;
    }
    Ok(())
}
