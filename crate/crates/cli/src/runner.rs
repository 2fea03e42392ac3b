//! The train and ensemble commands: load inputs, run training, write
//! artifacts (config echo, checkpoints, reports, manifest) and print the
//! one-line summary.
//!
//! Artifacts are written to a temp file and renamed into place, so a
//! failed run leaves no partial outputs behind.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use embercast_core::data::{LabeledDataset, RawPost};
use embercast_core::embeddings::{EmbeddingSource, MetaSource, WordVectors};
use embercast_core::ensemble::{
    derive_weights, evaluate_ensemble, EnsembleMember, EnsembleSpec, ManifestMember, WeightMode,
};
use embercast_core::nets::{
    save_checkpoint, CheckpointMeta, ClassifierConfig, RecurrentClassifier,
};
use embercast_core::rng::Rng;
use embercast_core::text::{PipelineConfig, Stopwords};
use embercast_core::train::{evaluate, split, train, TrainConfig, TrainReport};

use crate::config::{FeatureSpec, RunConfig, SourceKind, WeightSetting};
use crate::{CliError, CliResult};

pub fn load_stopwords(path: &Option<PathBuf>) -> CliResult<Stopwords> {
    match path {
        None => Ok(Stopwords::default_english()),
        Some(path) => {
            let file = fs::File::open(path)
                .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
            Stopwords::from_reader(std::io::BufReader::new(file))
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
        }
    }
}

pub fn load_word_vectors(path: &Path, label: &str) -> CliResult<Arc<WordVectors>> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
    let wv = WordVectors::parse(std::io::BufReader::new(file), label)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(Arc::new(wv))
}

pub fn load_sources(
    config: &RunConfig,
    kinds: &[SourceKind],
) -> CliResult<BTreeMap<SourceKind, Arc<WordVectors>>> {
    let mut out = BTreeMap::new();
    for &kind in kinds {
        let path = config
            .source_paths
            .get(&kind)
            .ok_or_else(|| CliError::Config(format!("missing {} embedding path", kind.label())))?;
        out.insert(kind, load_word_vectors(path, kind.label())?);
    }
    Ok(out)
}

pub fn load_dataset(config: &RunConfig) -> CliResult<LabeledDataset> {
    let file = fs::File::open(&config.data)
        .map_err(|e| CliError::Config(format!("cannot open {}: {e}", config.data.display())))?;
    let reader = std::io::BufReader::new(file);
    let event = config
        .data
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let dataset = if config.lenient {
        let outcome = embercast_core::data::load_tsv_lenient(reader, &event)
            .map_err(|e| CliError::Data(format!("{}: {e}", config.data.display())))?;
        if outcome.skipped > 0 {
            eprintln!("warning: skipped {} malformed rows", outcome.skipped);
        }
        outcome.dataset
    } else {
        embercast_core::data::load_tsv(reader, &event)
            .map_err(|e| CliError::Data(format!("{}: {e}", config.data.display())))?
    };
    Ok(dataset)
}

/// Write through a temp file and rename into place.
pub fn write_atomic(
    path: &Path,
    write: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> CliResult<()> {
    let io_err =
        |e: std::io::Error| CliError::Config(format!("cannot write {}: {e}", path.display()));
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let file = fs::File::create(&tmp).map_err(io_err)?;
        let mut writer = BufWriter::new(file);
        write(&mut writer).map_err(io_err)?;
        writer.flush().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}

fn train_config(config: &RunConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        patience: if config.patience == 0 { None } else { Some(config.patience) },
        val_fraction: config.val_fraction,
        seed,
        max_len: config.max_len,
    }
}

fn classifier_config(config: &RunConfig) -> ClassifierConfig {
    ClassifierConfig {
        hidden: config.hidden,
        dense: config.dense,
        dropout_embed: config.dropout_embed,
        dropout_recurrent: config.dropout_recurrent,
        dropout_dense: config.dropout_dense,
    }
}

struct TrainedModel {
    model: RecurrentClassifier,
    report: TrainReport,
}

/// Init and fit one model; the whole run is driven by `seed`.
fn fit_one(
    config: &RunConfig,
    source: &EmbeddingSource,
    source_name: &str,
    stopwords: &Stopwords,
    train_posts: &[RawPost],
    seed: u64,
) -> CliResult<TrainedModel> {
    let mut rng = Rng::new(seed);
    let mut model = RecurrentClassifier::new(
        config.scheme.cell,
        source_name,
        source.dim(),
        classifier_config(config),
        &mut rng,
    );
    let report = train(
        &mut model,
        source,
        stopwords,
        train_posts,
        &train_config(config, seed),
        &mut rng,
    )?;
    Ok(TrainedModel { model, report })
}

pub fn cmd_train(config: &RunConfig) -> CliResult<()> {
    let stopwords = load_stopwords(&config.stopwords)?;
    let dataset = load_dataset(config)?;
    let required = config.scheme.required_sources();
    let sources = load_sources(config, &required)?;

    let (source, source_name): (EmbeddingSource, &str) = match config.scheme.feature {
        FeatureSpec::Single(kind) => {
            (EmbeddingSource::Single(sources[&kind].clone()), kind.label())
        }
        FeatureSpec::Meta => {
            let members = vec![
                sources[&SourceKind::Glove].clone(),
                sources[&SourceKind::Fasttext].clone(),
                sources[&SourceKind::Crisis].clone(),
            ];
            (EmbeddingSource::Meta(MetaSource::new(members)), "meta")
        }
        FeatureSpec::Ensemble => unreachable!("dispatched to cmd_ensemble"),
    };

    let (train_posts, test_posts) = split(dataset.posts(), config.test_fraction, config.seed)?;
    let mut fitted = fit_one(config, &source, source_name, &stopwords, &train_posts, config.seed)?;
    let accuracy = evaluate(&fitted.model, &test_posts, &source, &stopwords, config.max_len)?;
    fitted.report.test_accuracy = Some(accuracy);

    fs::create_dir_all(&config.out_dir).map_err(|e| {
        CliError::Config(format!("cannot create {}: {e}", config.out_dir.display()))
    })?;
    let pipe = PipelineConfig::new(stopwords, config.max_len);
    let meta = CheckpointMeta { max_len: config.max_len, pipeline_fingerprint: pipe.fingerprint() };
    write_atomic(&config.out_dir.join("run_config.txt"), |w| config.write_echo(w))?;
    write_atomic(&config.out_dir.join("model.ckpt"), |w| {
        save_checkpoint(&fitted.model, &meta, w)
    })?;
    write_atomic(&config.out_dir.join("train_report.txt"), |w| fitted.report.write_text(w))?;

    println!("scheme={} test_accuracy={accuracy:?}", config.scheme);
    Ok(())
}

/// Ensemble member order. `paper_fixed` weights (0.4, 0.2, 0.4) are
/// defined for exactly this order.
const MEMBER_ORDER: [SourceKind; 3] = [SourceKind::Glove, SourceKind::Crisis, SourceKind::Fasttext];

pub fn cmd_ensemble(config: &RunConfig) -> CliResult<()> {
    let stopwords = load_stopwords(&config.stopwords)?;
    let dataset = load_dataset(config)?;
    let sources = load_sources(config, &SourceKind::ALL)?;

    // One split for all members, so the fused prediction is evaluated on
    // a test set no member ever trained on.
    let (train_posts, test_posts) = split(dataset.posts(), config.test_fraction, config.seed)?;

    // Per-member seeds come from the master seed by fixed offsets, so the
    // members are independent but the whole run replays from one seed.
    let results: Vec<CliResult<TrainedModel>> = std::thread::scope(|scope| {
        let handles: Vec<_> = MEMBER_ORDER
            .iter()
            .enumerate()
            .map(|(index, kind)| {
                let source = EmbeddingSource::Single(sources[kind].clone());
                let stopwords = &stopwords;
                let train_posts = &train_posts;
                let member_seed = config.seed.wrapping_add(index as u64 + 1);
                scope.spawn(move || {
                    fit_one(config, &source, kind.label(), stopwords, train_posts, member_seed)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("member thread panicked")).collect()
    });

    let mut members = Vec::with_capacity(3);
    for (kind, result) in MEMBER_ORDER.iter().zip(results) {
        let mut fitted = result?;
        let source = EmbeddingSource::Single(sources[kind].clone());
        let accuracy =
            evaluate(&fitted.model, &test_posts, &source, &stopwords, config.max_len)?;
        fitted.report.test_accuracy = Some(accuracy);
        members.push((*kind, fitted, source));
    }

    let weights = match &config.weights {
        WeightSetting::Mode(WeightMode::ValProportional) => {
            let accs: Vec<f64> = members
                .iter()
                .map(|(_, fitted, _)| {
                    fitted.report.epochs[fitted.report.best_epoch - 1].val_accuracy
                })
                .collect();
            derive_weights(WeightMode::ValProportional, 3, Some(&accs))?
        }
        WeightSetting::Mode(mode) => derive_weights(*mode, 3, None)?,
        WeightSetting::Explicit(values) => values.clone(),
    };

    let pipe = PipelineConfig::new(stopwords, config.max_len);
    let ensemble_members: Vec<EnsembleMember> = members
        .iter()
        .map(|(kind, fitted, source)| EnsembleMember {
            label: kind.label().to_string(),
            model: fitted.model.clone(),
            source: source.clone(),
        })
        .collect();
    let combined_accuracy = evaluate_ensemble(&ensemble_members, &weights, &test_posts, &pipe)?;

    fs::create_dir_all(&config.out_dir).map_err(|e| {
        CliError::Config(format!("cannot create {}: {e}", config.out_dir.display()))
    })?;
    let meta = CheckpointMeta { max_len: config.max_len, pipeline_fingerprint: pipe.fingerprint() };
    write_atomic(&config.out_dir.join("run_config.txt"), |w| config.write_echo(w))?;
    let mut manifest_members = Vec::with_capacity(3);
    for ((kind, fitted, _), weight) in members.iter().zip(&weights) {
        let ckpt_name = format!("{}.ckpt", kind.label());
        write_atomic(&config.out_dir.join(&ckpt_name), |w| {
            save_checkpoint(&fitted.model, &meta, w)
        })?;
        write_atomic(&config.out_dir.join(format!("{}_report.txt", kind.label())), |w| {
            fitted.report.write_text(w)
        })?;
        manifest_members.push(ManifestMember {
            label: kind.label().to_string(),
            checkpoint: ckpt_name,
            weight: *weight,
        });
    }
    let spec = EnsembleSpec::new(manifest_members)?;
    write_atomic(&config.out_dir.join("ensemble.manifest"), |w| spec.write(w))?;

    for (kind, fitted, _) in &members {
        let acc = fitted.report.test_accuracy.expect("set above");
        eprintln!("member {} test_accuracy={acc:?}", kind.label());
    }
    println!("scheme={} test_accuracy={combined_accuracy:?}", config.scheme);
    Ok(())
}
