//! Weighted fusion of predictions from independently trained models.
//!
//! Each member classifies a post against its own embedding source; the
//! final prediction is the per-class convex combination of the member
//! distributions under fixed non-negative weights summing to 1. Weights
//! are data, not code: they live in the ensemble manifest next to the
//! member checkpoints.

use std::io::{BufRead, Write};

use crate::data::{Label, RawPost};
use crate::embeddings::EmbeddingSource;
use crate::nets::{Prediction, RecurrentClassifier};
use crate::tensor::TensorError;
use crate::text::{encode, preprocess, PipelineConfig};

#[derive(Debug, thiserror::Error)]
pub enum EnsembleError {
    #[error("{preds} predictions but {weights} weights")]
    LengthMismatch { preds: usize, weights: usize },
    #[error("bad weights: {0}")]
    BadWeights(String),
    #[error("weight mode val_proportional needs validation accuracies")]
    MissingAccuracies,
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error(transparent)]
    Member(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

fn validate_weights(weights: &[f64]) -> Result<(), EnsembleError> {
    if weights.is_empty() {
        return Err(EnsembleError::BadWeights("no weights".into()));
    }
    if let Some(w) = weights.iter().find(|w| **w < 0.0 || !w.is_finite()) {
        return Err(EnsembleError::BadWeights(format!("negative or non-finite weight {w}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(EnsembleError::BadWeights(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// Per-class convex combination of member predictions.
pub fn combine(preds: &[Prediction], weights: &[f64]) -> Result<Prediction, EnsembleError> {
    if preds.len() != weights.len() {
        return Err(EnsembleError::LengthMismatch { preds: preds.len(), weights: weights.len() });
    }
    validate_weights(weights)?;
    let mut p_informative = 0.0;
    let mut p_not_informative = 0.0;
    for (pred, &w) in preds.iter().zip(weights) {
        p_informative += w * pred.p_informative;
        p_not_informative += w * pred.p_not_informative;
    }
    Ok(Prediction { p_informative, p_not_informative })
}

/// How member weights are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// The published fixed mixture (0.4, 0.2, 0.4) for members ordered
    /// (glove, crisis, fasttext).
    PaperFixed,
    Uniform,
    /// Validation accuracies normalized to sum 1.
    ValProportional,
}

impl WeightMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightMode::PaperFixed => "paper_fixed",
            WeightMode::Uniform => "uniform",
            WeightMode::ValProportional => "val_proportional",
        }
    }

    pub fn parse(s: &str) -> Option<WeightMode> {
        match s {
            "paper_fixed" => Some(WeightMode::PaperFixed),
            "uniform" => Some(WeightMode::Uniform),
            "val_proportional" => Some(WeightMode::ValProportional),
            _ => None,
        }
    }
}

/// Produce weights for `k` members under the given mode.
pub fn derive_weights(
    mode: WeightMode,
    k: usize,
    val_accuracies: Option<&[f64]>,
) -> Result<Vec<f64>, EnsembleError> {
    match mode {
        WeightMode::PaperFixed => {
            if k != 3 {
                return Err(EnsembleError::BadWeights(format!(
                    "paper_fixed is defined for 3 members (glove, crisis, fasttext), got {k}"
                )));
            }
            Ok(vec![0.4, 0.2, 0.4])
        }
        WeightMode::Uniform => Ok(vec![1.0 / k as f64; k]),
        WeightMode::ValProportional => {
            let accs = val_accuracies.ok_or(EnsembleError::MissingAccuracies)?;
            if accs.len() != k {
                return Err(EnsembleError::LengthMismatch { preds: k, weights: accs.len() });
            }
            let sum: f64 = accs.iter().sum();
            if sum <= 0.0 || accs.iter().any(|a| *a < 0.0) {
                return Err(EnsembleError::BadWeights("accuracies must be non-negative with a positive sum".into()));
            }
            Ok(accs.iter().map(|a| a / sum).collect())
        }
    }
}

/// One loaded ensemble member: a trained model plus the embedding source
/// it was trained against.
pub struct EnsembleMember {
    pub label: String,
    pub model: RecurrentClassifier,
    pub source: EmbeddingSource,
}

/// Classify one post: every member encodes it against its own source,
/// the predictions are combined, and argmax applies the usual tie rule.
pub fn ensemble_classify(
    members: &[EnsembleMember],
    weights: &[f64],
    post: &RawPost,
    pipe: &PipelineConfig,
) -> Result<(Label, Prediction), EnsembleError> {
    let tokens = preprocess(&post.text, &pipe.stopwords);
    let mut preds = Vec::with_capacity(members.len());
    for member in members {
        let seq = encode(&tokens, &member.source, pipe.max_len);
        let mut rng = crate::rng::Rng::new(0); // eval mode draws nothing
        preds.push(member.model.classify(&seq, false, &mut rng)?);
    }
    let combined = combine(&preds, weights)?;
    Ok((combined.argmax(), combined))
}

/// Ensemble accuracy over a labeled set, batching each member's inferences.
pub fn evaluate_ensemble(
    members: &[EnsembleMember],
    weights: &[f64],
    posts: &[RawPost],
    pipe: &PipelineConfig,
) -> Result<f64, EnsembleError> {
    validate_weights(weights)?;
    assert!(!posts.is_empty());
    let token_lists: Vec<Vec<String>> =
        posts.iter().map(|p| preprocess(&p.text, &pipe.stopwords)).collect();
    let mut per_member = Vec::with_capacity(members.len());
    for member in members {
        let seqs: Vec<_> =
            token_lists.iter().map(|t| encode(t, &member.source, pipe.max_len)).collect();
        let refs: Vec<_> = seqs.iter().collect();
        per_member.push(member.model.classify_batch(&refs)?);
    }
    let mut correct = 0usize;
    for (i, post) in posts.iter().enumerate() {
        let preds: Vec<Prediction> = per_member.iter().map(|m| m[i]).collect();
        let combined = combine(&preds, weights)?;
        if Some(combined.argmax()) == post.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / posts.len() as f64)
}

/// Manifest entry: member source label, checkpoint path, weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestMember {
    pub label: String,
    pub checkpoint: String,
    pub weight: f64,
}

/// The on-disk description of an ensemble: ordered members with their
/// checkpoint paths and weights. Weight invariants are enforced both at
/// write and at load.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub members: Vec<ManifestMember>,
}

impl EnsembleSpec {
    pub fn new(members: Vec<ManifestMember>) -> Result<Self, EnsembleError> {
        let spec = EnsembleSpec { members };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        let weights: Vec<f64> = self.members.iter().map(|m| m.weight).collect();
        validate_weights(&weights)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.weight).collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "embercast ensemble v1")?;
        for m in &self.members {
            writeln!(w, "member {} {} {:?}", m.label, m.checkpoint, m.weight)?;
        }
        writeln!(w, "end")?;
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self, EnsembleError> {
        let bad = |line: usize, msg: String| EnsembleError::Manifest { line, msg };
        let mut members = Vec::new();
        let mut saw_magic = false;
        let mut saw_end = false;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = idx + 1;
            if idx == 0 {
                if line != "embercast ensemble v1" {
                    return Err(bad(line_no, format!("bad magic {line:?}")));
                }
                saw_magic = true;
                continue;
            }
            if line == "end" {
                saw_end = true;
                break;
            }
            let Some(rest) = line.strip_prefix("member ") else {
                return Err(bad(line_no, format!("expected member line, got {line:?}")));
            };
            let fields: Vec<&str> = rest.split(' ').collect();
            if fields.len() < 3 {
                return Err(bad(line_no, "member needs label, path, weight".into()));
            }
            let weight: f64 = fields[fields.len() - 1]
                .parse()
                .map_err(|_| bad(line_no, "bad weight".into()))?;
            members.push(ManifestMember {
                label: fields[0].to_string(),
                checkpoint: fields[1..fields.len() - 1].join(" "),
                weight,
            });
        }
        if !saw_magic || !saw_end {
            return Err(bad(0, "truncated manifest".into()));
        }
        EnsembleSpec::new(members)
    }
}
