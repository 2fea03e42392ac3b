//! Dataset splitting, mini-batch training with early stopping, and
//! evaluation for a single classifier.
//!
//! Training is Adam over shuffled mini-batches of 2-class cross-entropy.
//! A validation slice is carved out of the training split; when early
//! stopping is enabled the loop halts after `patience` epochs without a
//! validation-loss improvement and the best-epoch weights are restored.
//! Everything is driven by the caller's seeded rng, so a (config, seed)
//! pair reproduces its run bit for bit.

use std::io::{BufRead, Write};

use crate::data::{Label, RawPost};
use crate::embeddings::EmbeddingSource;
use crate::nets::{Prediction, RecurrentClassifier};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, TensorError};
use crate::text::{encode, preprocess, EncodedSequence, Stopwords};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("dataset has {have} examples; at least {need} are required")]
    TooFewExamples { have: usize, need: usize },
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("post {id:?} has no label")]
    MissingLabel { id: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("report line {line}: {msg}")]
    Report { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Knobs for one training run.
///
/// `patience: None` disables early stopping entirely: the loop runs the
/// full epoch budget and keeps the final weights (no best-epoch restore).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: Option<usize>,
    pub val_fraction: f64,
    pub seed: u64,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            patience: Some(5),
            val_fraction: 0.1,
            seed: 0,
            max_len: 30,
        }
    }
}

impl TrainConfig {
    fn validate(&self) {
        assert!(self.max_epochs >= 1);
        assert!(self.batch_size >= 1);
        assert!(self.val_fraction > 0.0 && self.val_fraction < 1.0);
        assert!(self.patience.is_none_or(|p| p >= 1));
        assert!(self.max_len >= 1);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub test_accuracy: Option<f64>,
}

impl TrainReport {
    /// Line-oriented text form; floats use shortest round-trip decimals,
    /// so serialize → parse is exact.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "embercast train-report v1")?;
        for e in &self.epochs {
            writeln!(
                w,
                "epoch {} train_loss {:?} val_loss {:?} val_acc {:?}",
                e.epoch, e.train_loss, e.val_loss, e.val_accuracy
            )?;
        }
        writeln!(w, "stopped_epoch {}", self.stopped_epoch)?;
        writeln!(w, "best_epoch {}", self.best_epoch)?;
        match self.test_accuracy {
            Some(acc) => writeln!(w, "test_accuracy {acc:?}")?,
            None => writeln!(w, "test_accuracy none")?,
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("report text is utf-8")
    }

    pub fn parse<R: BufRead>(reader: R) -> Result<Self, TrainError> {
        let bad = |line: usize, msg: &str| TrainError::Report { line, msg: msg.to_string() };
        let mut epochs = Vec::new();
        let mut stopped_epoch = None;
        let mut best_epoch = None;
        let mut test_accuracy = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = idx + 1;
            if idx == 0 {
                if line != "embercast train-report v1" {
                    return Err(bad(line_no, "bad magic"));
                }
                continue;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            match fields.as_slice() {
                ["epoch", e, "train_loss", tl, "val_loss", vl, "val_acc", va] => {
                    epochs.push(EpochStats {
                        epoch: e.parse().map_err(|_| bad(line_no, "bad epoch"))?,
                        train_loss: tl.parse().map_err(|_| bad(line_no, "bad train_loss"))?,
                        val_loss: vl.parse().map_err(|_| bad(line_no, "bad val_loss"))?,
                        val_accuracy: va.parse().map_err(|_| bad(line_no, "bad val_acc"))?,
                    });
                }
                ["stopped_epoch", v] => {
                    stopped_epoch = Some(v.parse().map_err(|_| bad(line_no, "bad stopped_epoch"))?)
                }
                ["best_epoch", v] => {
                    best_epoch = Some(v.parse().map_err(|_| bad(line_no, "bad best_epoch"))?)
                }
                ["test_accuracy", "none"] => test_accuracy = Some(None),
                ["test_accuracy", v] => {
                    test_accuracy =
                        Some(Some(v.parse().map_err(|_| bad(line_no, "bad test_accuracy"))?))
                }
                [""] => {}
                _ => return Err(bad(line_no, "unrecognized line")),
            }
        }
        Ok(TrainReport {
            epochs,
            stopped_epoch: stopped_epoch.ok_or_else(|| bad(0, "missing stopped_epoch"))?,
            best_epoch: best_epoch.ok_or_else(|| bad(0, "missing best_epoch"))?,
            test_accuracy: test_accuracy.ok_or_else(|| bad(0, "missing test_accuracy"))?,
        })
    }
}

fn labeled(post: &RawPost) -> Result<Label, TrainError> {
    post.label.ok_or_else(|| TrainError::MissingLabel { id: post.id.clone() })
}

/// Stratified train/test split: each class is shuffled under the seed and
/// `test_fraction` of it (rounded) goes to the test side. Both sides keep
/// corpus order, and the result is a disjoint, exhaustive partition.
pub fn split(
    posts: &[RawPost],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<RawPost>, Vec<RawPost>), TrainError> {
    assert!(test_fraction > 0.0 && test_fraction < 1.0);
    if posts.len() < 5 {
        return Err(TrainError::TooFewExamples { have: posts.len(), need: 5 });
    }
    let mut rng = Rng::new(seed);
    let mut test_idx = Vec::new();
    for class in [Label::NotInformative, Label::Informative] {
        let mut members: Vec<usize> = Vec::new();
        for (i, post) in posts.iter().enumerate() {
            if labeled(post)? == class {
                members.push(i);
            }
        }
        let take = (members.len() as f64 * test_fraction).round() as usize;
        rng.shuffle(&mut members);
        test_idx.extend_from_slice(&members[..take]);
    }
    let in_test: std::collections::HashSet<usize> = test_idx.iter().copied().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, post) in posts.iter().enumerate() {
        if in_test.contains(&i) {
            test.push(post.clone());
        } else {
            train.push(post.clone());
        }
    }
    Ok((train, test))
}

/// Negative log-likelihood of the true class, with the probability
/// clamped to at least 1e-12.
pub fn cross_entropy(pred: &Prediction, label: Label) -> f64 {
    -pred.prob(label).max(1e-12).ln()
}

/// Adam with bias correction; state is kept per parameter buffer in the
/// model's canonical order.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((param, grad), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Mean batch cross-entropy as a graph node: -mean(ln(p_label)).
pub fn batch_loss(g: &mut Graph, probs: Tensor, labels: &[Label]) -> Result<Tensor, TensorError> {
    let mut onehot = vec![0.0; labels.len() * 2];
    for (i, label) in labels.iter().enumerate() {
        onehot[i * 2 + label.index()] = 1.0;
    }
    let oh = g.leaf(&[labels.len(), 2], &onehot, false)?;
    let picked = g.mul(probs, oh)?;
    let per_row = g.sum_axis(picked, 1)?;
    let clamped = g.clamp_min(per_row, 1e-12)?;
    let ln = g.ln(clamped)?;
    let mean = g.mean(ln)?;
    g.scale(mean, -1.0)
}

struct Encoded {
    seq: EncodedSequence,
    label: Label,
}

fn encode_posts(
    posts: &[RawPost],
    source: &EmbeddingSource,
    stopwords: &Stopwords,
    max_len: usize,
) -> Result<Vec<Encoded>, TrainError> {
    posts
        .iter()
        .map(|post| {
            let label = labeled(post)?;
            let tokens = preprocess(&post.text, stopwords);
            Ok(Encoded { seq: encode(&tokens, source, max_len), label })
        })
        .collect()
}

fn eval_encoded(model: &RecurrentClassifier, items: &[Encoded]) -> Result<(f64, f64), TrainError> {
    let refs: Vec<&EncodedSequence> = items.iter().map(|e| &e.seq).collect();
    let preds = model.classify_batch(&refs)?;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (item, pred) in items.iter().zip(&preds) {
        loss_sum += cross_entropy(pred, item.label);
        if pred.argmax() == item.label {
            correct += 1;
        }
    }
    let n = items.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Carve a validation slice out of the training posts. Plain stratified
/// rounding, except that an all-empty result promotes one example so the
/// validation loss is always defined.
fn carve_val(
    posts: &[RawPost],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<RawPost>, Vec<RawPost>), TrainError> {
    let (train, mut val) = match split(posts, fraction, seed) {
        Ok(pair) => pair,
        Err(TrainError::TooFewExamples { .. }) => (posts.to_vec(), Vec::new()),
        Err(e) => return Err(e),
    };
    if !val.is_empty() {
        return Ok((train, val));
    }
    let mut train = train;
    if train.len() >= 2 {
        val.push(train.pop().expect("nonempty"));
    }
    Ok((train, val))
}

/// Train `model` in place. A validation slice is carved from
/// `train_posts` and the best-validation-loss weights are restored at
/// the end. With early stopping disabled (`patience: None`) there is no
/// carve: the loop fits all posts for the whole budget, keeps the final
/// weights, and the report's validation columns echo training-set
/// metrics.
pub fn train(
    model: &mut RecurrentClassifier,
    source: &EmbeddingSource,
    stopwords: &Stopwords,
    train_posts: &[RawPost],
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainReport, TrainError> {
    config.validate();
    if train_posts.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let (fit_posts, val_posts) = if config.patience.is_some() {
        let val_seed = rng.next_u64();
        carve_val(train_posts, config.val_fraction, val_seed)?
    } else {
        (train_posts.to_vec(), Vec::new())
    };
    if fit_posts.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let fit = encode_posts(&fit_posts, source, stopwords, config.max_len)?;
    let val = encode_posts(&val_posts, source, stopwords, config.max_len)?;

    let sizes: Vec<usize> = model.named_params().iter().map(|(_, v, _)| v.len()).collect();
    let mut adam = Adam::new(config.learning_rate, &sizes);

    let mut report = TrainReport {
        epochs: Vec::new(),
        stopped_epoch: 0,
        best_epoch: 0,
        test_accuracy: None,
    };
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<Vec<Vec<f64>>> = None;
    let mut bad_epochs = 0usize;

    let mut order: Vec<usize> = (0..fit.len()).collect();
    for epoch in 1..=config.max_epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let seqs: Vec<&EncodedSequence> = chunk.iter().map(|&i| &fit[i].seq).collect();
            let labels: Vec<Label> = chunk.iter().map(|&i| fit[i].label).collect();
            let mut g = Graph::new();
            let leaves = model.bind(&mut g, true)?;
            let probs = model.forward(&mut g, &leaves, &seqs, true, rng)?;
            let loss = batch_loss(&mut g, probs, &labels)?;
            loss_sum += g.values(loss)[0] * chunk.len() as f64;
            g.backward(loss)?;
            let leaf_list = RecurrentClassifier::leaves_in_order(&leaves);
            let grads: Vec<&[f64]> =
                leaf_list.iter().map(|&t| g.grad(t).expect("trainable leaf")).collect();
            let mut params = model.params_mut();
            adam.step(&mut params, &grads);
        }
        let train_loss = loss_sum / fit.len() as f64;
        let (val_loss, val_accuracy) = eval_encoded(model, if val.is_empty() { &fit } else { &val })?;
        report.epochs.push(EpochStats { epoch, train_loss, val_loss, val_accuracy });
        report.stopped_epoch = epoch;

        if let Some(patience) = config.patience {
            if val_loss < best_val {
                best_val = val_loss;
                report.best_epoch = epoch;
                best_params = Some(model.named_params().iter().map(|(_, v, _)| (*v).clone()).collect());
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
                if bad_epochs >= patience {
                    break;
                }
            }
        } else {
            report.best_epoch = epoch;
        }
    }

    if let Some(best) = best_params {
        for (param, saved) in model.params_mut().into_iter().zip(best) {
            *param = saved;
        }
    }
    Ok(report)
}

/// Fraction of posts whose argmax prediction matches the label. Ties in
/// the prediction resolve toward `not_informative`.
pub fn evaluate(
    model: &RecurrentClassifier,
    posts: &[RawPost],
    source: &EmbeddingSource,
    stopwords: &Stopwords,
    max_len: usize,
) -> Result<f64, TrainError> {
    if posts.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    let encoded = encode_posts(posts, source, stopwords, max_len)?;
    let (_, accuracy) = eval_encoded(model, &encoded)?;
    Ok(accuracy)
}
