//! Run configuration: scheme notation, config files, flag overrides.
//!
//! A run is described by a simple `key = value` config file, command-line
//! flags (flags win), or both. `EMBERCAST_CONFIG` names a default config
//! file used when `--config` is absent. Every run echoes its fully
//! resolved configuration back out as a loadable config file, so any
//! artifact can be reproduced bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use embercast_core::ensemble::WeightMode;
use embercast_core::nets::CellKind;

use crate::CliError;

/// The three pretrained vector families; tags T1..T3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SourceKind {
    Glove,
    Fasttext,
    Crisis,
}

impl SourceKind {
    pub const ALL: [SourceKind; 3] = [SourceKind::Glove, SourceKind::Fasttext, SourceKind::Crisis];

    pub fn label(self) -> &'static str {
        match self {
            SourceKind::Glove => "glove",
            SourceKind::Fasttext => "fasttext",
            SourceKind::Crisis => "crisis",
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            SourceKind::Glove => "T1",
            SourceKind::Fasttext => "T2",
            SourceKind::Crisis => "T3",
        }
    }

    fn from_tag(tag: &str) -> Option<SourceKind> {
        match tag {
            "T1" => Some(SourceKind::Glove),
            "T2" => Some(SourceKind::Fasttext),
            "T3" => Some(SourceKind::Crisis),
            _ => None,
        }
    }
}

/// What feeds the model: one source, the averaged meta source, or an
/// ensemble of per-source models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSpec {
    Single(SourceKind),
    Meta,
    Ensemble,
}

/// One cell of the experiment grid, e.g. `T1+L1` or `E({T1+T2+T3}+L2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scheme {
    pub feature: FeatureSpec,
    pub cell: CellKind,
}

impl Scheme {
    pub fn parse(s: &str) -> Option<Scheme> {
        let cell_of = |tag: &str| match tag {
            "L1" => Some(CellKind::BiLstm),
            "L2" => Some(CellKind::Gru),
            _ => None,
        };
        if let Some(rest) = s.strip_prefix("E({T1+T2+T3}+") {
            let tag = rest.strip_suffix(')')?;
            return Some(Scheme { feature: FeatureSpec::Ensemble, cell: cell_of(tag)? });
        }
        if let Some(rest) = s.strip_prefix("M(T1+T2+T3)+") {
            return Some(Scheme { feature: FeatureSpec::Meta, cell: cell_of(rest)? });
        }
        let (feature, cell) = s.split_once('+')?;
        Some(Scheme {
            feature: FeatureSpec::Single(SourceKind::from_tag(feature)?),
            cell: cell_of(cell)?,
        })
    }

    pub fn required_sources(&self) -> Vec<SourceKind> {
        match self.feature {
            FeatureSpec::Single(kind) => vec![kind],
            FeatureSpec::Meta | FeatureSpec::Ensemble => SourceKind::ALL.to_vec(),
        }
    }

    pub fn is_ensemble(&self) -> bool {
        matches!(self.feature, FeatureSpec::Ensemble)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = match self.cell {
            CellKind::BiLstm => "L1",
            CellKind::Gru => "L2",
        };
        match self.feature {
            FeatureSpec::Single(kind) => write!(f, "{}+{cell}", kind.tag()),
            FeatureSpec::Meta => write!(f, "M(T1+T2+T3)+{cell}"),
            FeatureSpec::Ensemble => write!(f, "E({{T1+T2+T3}}+{cell})"),
        }
    }
}

/// How ensemble weights are chosen: a derivation mode or explicit values.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightSetting {
    Mode(WeightMode),
    Explicit(Vec<f64>),
}

impl WeightSetting {
    pub fn parse(s: &str) -> Result<WeightSetting, String> {
        if let Some(mode) = WeightMode::parse(s) {
            return Ok(WeightSetting::Mode(mode));
        }
        let values: Result<Vec<f64>, _> = s.split(',').map(|v| v.trim().parse()).collect();
        match values {
            Ok(v) if !v.is_empty() => Ok(WeightSetting::Explicit(v)),
            _ => Err(format!(
                "weights must be paper_fixed, uniform, val_proportional, or a comma list, got {s:?}"
            )),
        }
    }
}

impl fmt::Display for WeightSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightSetting::Mode(mode) => write!(f, "{}", mode.as_str()),
            WeightSetting::Explicit(values) => {
                let parts: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
                write!(f, "{}", parts.join(","))
            }
        }
    }
}

/// Fully resolved settings for a train or ensemble run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scheme: Scheme,
    pub data: PathBuf,
    pub out_dir: PathBuf,
    pub source_paths: BTreeMap<SourceKind, PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub hidden: usize,
    pub dense: usize,
    pub dropout_embed: f64,
    pub dropout_recurrent: f64,
    pub dropout_dense: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// 0 disables early stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    pub max_len: usize,
    pub weights: WeightSetting,
    pub lenient: bool,
}

impl RunConfig {
    /// Echo in config-file form; loading the echo reproduces the run.
    pub fn write_echo<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# resolved run configuration")?;
        writeln!(w, "scheme = {}", self.scheme)?;
        writeln!(w, "data = {}", self.data.display())?;
        writeln!(w, "out = {}", self.out_dir.display())?;
        for kind in SourceKind::ALL {
            if let Some(path) = self.source_paths.get(&kind) {
                writeln!(w, "{} = {}", kind.label(), path.display())?;
            }
        }
        if let Some(path) = &self.stopwords {
            writeln!(w, "stopwords = {}", path.display())?;
        }
        writeln!(w, "hidden = {}", self.hidden)?;
        writeln!(w, "dense = {}", self.dense)?;
        writeln!(w, "dropout_embed = {:?}", self.dropout_embed)?;
        writeln!(w, "dropout_recurrent = {:?}", self.dropout_recurrent)?;
        writeln!(w, "dropout_dense = {:?}", self.dropout_dense)?;
        writeln!(w, "epochs = {}", self.epochs)?;
        writeln!(w, "batch_size = {}", self.batch_size)?;
        writeln!(w, "learning_rate = {:?}", self.learning_rate)?;
        writeln!(w, "patience = {}", self.patience)?;
        writeln!(w, "val_fraction = {:?}", self.val_fraction)?;
        writeln!(w, "test_fraction = {:?}", self.test_fraction)?;
        writeln!(w, "seed = {}", self.seed)?;
        writeln!(w, "max_len = {}", self.max_len)?;
        writeln!(w, "weights = {}", self.weights)?;
        writeln!(w, "lenient = {}", self.lenient)?;
        Ok(())
    }
}

/// All-optional accumulation of settings; file values first, then flags.
#[derive(Debug, Default, Clone)]
pub struct ConfigDraft {
    pub scheme: Option<String>,
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub glove: Option<PathBuf>,
    pub fasttext: Option<PathBuf>,
    pub crisis: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub hidden: Option<usize>,
    pub dense: Option<usize>,
    pub dropout_embed: Option<f64>,
    pub dropout_recurrent: Option<f64>,
    pub dropout_dense: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub patience: Option<usize>,
    pub val_fraction: Option<f64>,
    pub test_fraction: Option<f64>,
    pub seed: Option<u64>,
    pub max_len: Option<usize>,
    pub weights: Option<String>,
    pub lenient: Option<bool>,
}

impl ConfigDraft {
    /// Layer `other` on top of this draft (set fields in `other` win).
    pub fn overlaid(self, other: ConfigDraft) -> ConfigDraft {
        ConfigDraft {
            scheme: other.scheme.or(self.scheme),
            data: other.data.or(self.data),
            out_dir: other.out_dir.or(self.out_dir),
            glove: other.glove.or(self.glove),
            fasttext: other.fasttext.or(self.fasttext),
            crisis: other.crisis.or(self.crisis),
            stopwords: other.stopwords.or(self.stopwords),
            hidden: other.hidden.or(self.hidden),
            dense: other.dense.or(self.dense),
            dropout_embed: other.dropout_embed.or(self.dropout_embed),
            dropout_recurrent: other.dropout_recurrent.or(self.dropout_recurrent),
            dropout_dense: other.dropout_dense.or(self.dropout_dense),
            epochs: other.epochs.or(self.epochs),
            batch_size: other.batch_size.or(self.batch_size),
            learning_rate: other.learning_rate.or(self.learning_rate),
            patience: other.patience.or(self.patience),
            val_fraction: other.val_fraction.or(self.val_fraction),
            test_fraction: other.test_fraction.or(self.test_fraction),
            seed: other.seed.or(self.seed),
            max_len: other.max_len.or(self.max_len),
            weights: other.weights.or(self.weights),
            lenient: other.lenient.or(self.lenient),
        }
    }

    pub fn from_file(path: &Path) -> Result<ConfigDraft, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut draft = ConfigDraft::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "{}:{}: expected key = value",
                    path.display(),
                    idx + 1
                )));
            };
            let key = key.trim();
            let value = value.trim().to_string();
            let bad = |what: &str| {
                CliError::Config(format!("{}:{}: bad {what} {value:?}", path.display(), idx + 1))
            };
            match key {
                "scheme" => draft.scheme = Some(value),
                "data" => draft.data = Some(PathBuf::from(value)),
                "out" => draft.out_dir = Some(PathBuf::from(value)),
                "glove" => draft.glove = Some(PathBuf::from(value)),
                "fasttext" => draft.fasttext = Some(PathBuf::from(value)),
                "crisis" => draft.crisis = Some(PathBuf::from(value)),
                "stopwords" => draft.stopwords = Some(PathBuf::from(value)),
                "hidden" => draft.hidden = Some(value.parse().map_err(|_| bad("hidden"))?),
                "dense" => draft.dense = Some(value.parse().map_err(|_| bad("dense"))?),
                "dropout_embed" => {
                    draft.dropout_embed = Some(value.parse().map_err(|_| bad("dropout_embed"))?)
                }
                "dropout_recurrent" => {
                    draft.dropout_recurrent =
                        Some(value.parse().map_err(|_| bad("dropout_recurrent"))?)
                }
                "dropout_dense" => {
                    draft.dropout_dense = Some(value.parse().map_err(|_| bad("dropout_dense"))?)
                }
                "epochs" => draft.epochs = Some(value.parse().map_err(|_| bad("epochs"))?),
                "batch_size" => {
                    draft.batch_size = Some(value.parse().map_err(|_| bad("batch_size"))?)
                }
                "learning_rate" => {
                    draft.learning_rate = Some(value.parse().map_err(|_| bad("learning_rate"))?)
                }
                "patience" => draft.patience = Some(value.parse().map_err(|_| bad("patience"))?),
                "val_fraction" => {
                    draft.val_fraction = Some(value.parse().map_err(|_| bad("val_fraction"))?)
                }
                "test_fraction" => {
                    draft.test_fraction = Some(value.parse().map_err(|_| bad("test_fraction"))?)
                }
                "seed" => draft.seed = Some(value.parse().map_err(|_| bad("seed"))?),
                "max_len" => draft.max_len = Some(value.parse().map_err(|_| bad("max_len"))?),
                "weights" => draft.weights = Some(value),
                "lenient" => draft.lenient = Some(value.parse().map_err(|_| bad("lenient"))?),
                _ => {
                    return Err(CliError::Config(format!(
                        "{}:{}: unknown key {key:?}",
                        path.display(),
                        idx + 1
                    )))
                }
            }
        }
        Ok(draft)
    }

    pub fn resolve(self) -> Result<RunConfig, CliError> {
        let scheme_text = self
            .scheme
            .ok_or_else(|| CliError::Config("no scheme given (e.g. --scheme T1+L1)".into()))?;
        let scheme = Scheme::parse(&scheme_text).ok_or_else(|| {
            CliError::Config(format!(
                "unknown scheme {scheme_text:?}; expected T1..T3+L1|L2, M(T1+T2+T3)+L1|L2, or E({{T1+T2+T3}}+L1|L2)"
            ))
        })?;
        let data = self.data.ok_or_else(|| CliError::Config("no dataset given (--data)".into()))?;

        let mut source_paths = BTreeMap::new();
        for (kind, path) in [
            (SourceKind::Glove, &self.glove),
            (SourceKind::Fasttext, &self.fasttext),
            (SourceKind::Crisis, &self.crisis),
        ] {
            if let Some(path) = path {
                source_paths.insert(kind, path.clone());
            }
        }
        for kind in scheme.required_sources() {
            if !source_paths.contains_key(&kind) {
                return Err(CliError::Config(format!(
                    "scheme {scheme} needs the {} embedding file (--{})",
                    kind.label(),
                    kind.label()
                )));
            }
        }
        for path in source_paths.values().chain([&data]).chain(self.stopwords.iter()) {
            if !path.exists() {
                return Err(CliError::Config(format!("file not found: {}", path.display())));
            }
        }

        let weights = match self.weights {
            Some(text) => WeightSetting::parse(&text).map_err(CliError::Config)?,
            None => WeightSetting::Mode(WeightMode::PaperFixed),
        };
        if let WeightSetting::Explicit(values) = &weights {
            if scheme.is_ensemble() && values.len() != 3 {
                return Err(CliError::Config(format!(
                    "ensemble schemes have 3 members; got {} weights",
                    values.len()
                )));
            }
        }

        let config = RunConfig {
            scheme,
            data,
            out_dir: self.out_dir.unwrap_or_else(|| PathBuf::from("runs")),
            source_paths,
            stopwords: self.stopwords,
            hidden: self.hidden.unwrap_or(300),
            dense: self.dense.unwrap_or(1024),
            dropout_embed: self.dropout_embed.unwrap_or(0.3),
            dropout_recurrent: self.dropout_recurrent.unwrap_or(0.3),
            dropout_dense: self.dropout_dense.unwrap_or(0.8),
            epochs: self.epochs.unwrap_or(100),
            batch_size: self.batch_size.unwrap_or(32),
            learning_rate: self.learning_rate.unwrap_or(1e-3),
            patience: self.patience.unwrap_or(5),
            val_fraction: self.val_fraction.unwrap_or(0.1),
            test_fraction: self.test_fraction.unwrap_or(0.2),
            seed: self.seed.unwrap_or(0),
            max_len: self.max_len.unwrap_or(30),
            weights,
            lenient: self.lenient.unwrap_or(false),
        };
        if config.epochs == 0 || config.batch_size == 0 || config.max_len == 0 {
            return Err(CliError::Config("epochs, batch_size, and max_len must be positive".into()));
        }
        if !(config.val_fraction > 0.0 && config.val_fraction < 1.0) {
            return Err(CliError::Config("val_fraction must be in (0, 1)".into()));
        }
        if !(config.test_fraction > 0.0 && config.test_fraction < 1.0) {
            return Err(CliError::Config("test_fraction must be in (0, 1)".into()));
        }
        for rate in [config.dropout_embed, config.dropout_recurrent, config.dropout_dense] {
            if !(0.0..1.0).contains(&rate) {
                return Err(CliError::Config("dropout rates must be in [0, 1)".into()));
            }
        }
        Ok(config)
    }
}
