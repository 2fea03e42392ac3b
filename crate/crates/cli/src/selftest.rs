//! Built-in numeric checks: gradient fidelity of the primitives, the
//! cells, and a whole classifier; the published weight mixture; and
//! padding invariance of eval-mode predictions.

use std::sync::Arc;

use embercast_core::embeddings::{EmbeddingSource, WordVectors};
use embercast_core::ensemble::combine;
use embercast_core::nets::{
    bind_packed, gru_step, lstm_step, CellKind, CellLeaves, ClassifierConfig, GateLeaves,
    Prediction, RecurrentClassifier,
};
use embercast_core::rng::Rng;
use embercast_core::tensor::{grad_check, Graph, Tensor};
use embercast_core::text::encode;
use embercast_core::train::batch_loss;
use embercast_core::data::Label;

use crate::{CliError, CliResult};

fn carve(g: &mut Graph, p: Tensor, off: &mut usize, rows: usize, cols: usize) -> Tensor {
    let s = g.slice(p, 1, *off, rows * cols).expect("selftest slice");
    *off += rows * cols;
    g.reshape(s, &[rows, cols]).expect("selftest reshape")
}

struct Check {
    name: &'static str,
    error: f64,
    bound: f64,
}

fn primitive_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, error: f64, bound: f64| {
        out.push(Check { name, error, bound });
    };

    let worst =
        |f: &dyn Fn(&mut Graph, Tensor) -> embercast_core::tensor::Result<Tensor>,
         shape: &[usize],
         n: usize| {
            let mut worst = 0.0f64;
            for seed in 0..10u64 {
                let mut rng = Rng::new(7000 + seed);
                let x: Vec<f64> = (0..n).map(|_| rng.uniform(-1.5, 1.5)).collect();
                worst = worst.max(grad_check(f, shape, &x, 1e-5).expect("grad_check"));
            }
            worst
        };

    push(
        "matmul",
        worst(
            &|g, x| {
                let w = g.leaf(&[4, 3], &[0.3, -0.2, 0.7, 0.1, 0.5, -0.4, 0.2, 0.6, -0.1, 0.9, -0.8, 0.25], false)?;
                let y = g.matmul(x, w)?;
                g.sum(y)
            },
            &[2, 4],
            8,
        ),
        1e-6,
    );
    push(
        "add/sub/mul with broadcasting",
        worst(
            &|g, x| {
                let row = g.leaf(&[1, 4], &[0.2, -0.3, 0.4, 0.5], false)?;
                let col = g.leaf(&[2, 1], &[1.3, 0.7], false)?;
                let a = g.add(x, row)?;
                let m = g.mul(a, col)?;
                let s = g.sub(m, x)?;
                g.sum(s)
            },
            &[2, 4],
            8,
        ),
        1e-6,
    );
    push(
        "sigmoid",
        worst(
            &|g, x| {
                let y = g.sigmoid(x)?;
                g.sum(y)
            },
            &[6],
            6,
        ),
        1e-6,
    );
    push(
        "tanh",
        worst(
            &|g, x| {
                let y = g.tanh(x)?;
                g.sum(y)
            },
            &[6],
            6,
        ),
        1e-6,
    );
    push(
        "relu",
        worst(
            &|g, x| {
                let y = g.relu(x)?;
                g.sum(y)
            },
            &[6],
            6,
        ),
        1e-6,
    );
    push(
        "softmax/ln/clamp",
        worst(
            &|g, x| {
                let sm = g.softmax(x)?;
                let cl = g.clamp_min(sm, 1e-9)?;
                let ln = g.ln(cl)?;
                g.mean(ln)
            },
            &[3, 4],
            12,
        ),
        1e-6,
    );
    push(
        "concat/slice/sum_axis/scale",
        worst(
            &|g, x| {
                let top = g.slice(x, 0, 0, 1)?;
                let bottom = g.slice(x, 0, 1, 1)?;
                let wide = g.concat(1, &[top, bottom])?;
                let rows = g.sum_axis(wide, 1)?;
                let scaled = g.scale(rows, 0.25)?;
                g.sum(scaled)
            },
            &[2, 4],
            8,
        ),
        1e-6,
    );
    push(
        "dropout (train mode, fixed mask)",
        worst(
            &|g, x| {
                let mut rng = Rng::new(424242);
                let d = g.dropout(x, 0.3, true, &mut rng)?;
                g.sum(d)
            },
            &[8],
            8,
        ),
        1e-6,
    );
    out
}

fn cell_checks() -> Vec<Check> {
    let (input_dim, hidden) = (3usize, 4usize);
    let per_gate = input_dim * hidden + hidden * hidden + hidden;
    let mut checks = Vec::new();
    for (name, lstm) in [("lstm_step", true), ("gru_step", false)] {
        let n_gates = if lstm { 4 } else { 3 };
        let state = if lstm { 2 * hidden } else { hidden };
        let total = n_gates * per_gate + input_dim + state;
        let mut worst = 0.0f64;
        for seed in 0..10u64 {
            let mut rng = Rng::new(3500 + seed);
            let packed: Vec<f64> = (0..total).map(|_| rng.uniform(-0.8, 0.8)).collect();
            let err = grad_check(
                |g, p| {
                    let mut off = 0;
                    let gates = (0..n_gates)
                        .map(|_| GateLeaves {
                            w: carve(g, p, &mut off, input_dim, hidden),
                            u: carve(g, p, &mut off, hidden, hidden),
                            b: carve(g, p, &mut off, 1, hidden),
                        })
                        .collect::<Vec<_>>();
                    let cell = CellLeaves::from_gates(gates, hidden);
                    let x = carve(g, p, &mut off, 1, input_dim);
                    let h = carve(g, p, &mut off, 1, hidden);
                    if lstm {
                        let c = carve(g, p, &mut off, 1, hidden);
                        let (h1, _) = lstm_step(g, &cell, x, h, c)?;
                        g.sum(h1)
                    } else {
                        let h1 = gru_step(g, &cell, x, h)?;
                        g.sum(h1)
                    }
                },
                &[1, total],
                &packed,
                1e-5,
            )
            .expect("cell grad_check");
            worst = worst.max(err);
        }
        checks.push(Check { name, error: worst, bound: 1e-6 });
    }
    checks
}

fn toy_source(dim: usize, seed: u64) -> EmbeddingSource {
    let mut rng = Rng::new(seed);
    let rows: Vec<(String, Vec<f64>)> = (0..24)
        .map(|i| (format!("w{i}"), (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect()))
        .collect();
    EmbeddingSource::Single(Arc::new(WordVectors::from_rows("toy", dim, rows)))
}

fn full_model_check(kind: CellKind) -> Check {
    let dim = 5;
    let source = toy_source(dim, 9090);
    let config = ClassifierConfig { hidden: 4, dense: 6, ..ClassifierConfig::default() };
    let mut worst = 0.0f64;
    for seed in 0..3u64 {
        let mut rng = Rng::new(777 + seed);
        let model = RecurrentClassifier::new(kind, "toy", dim, config, &mut rng);
        let seqs: Vec<_> = (0..2)
            .map(|_| {
                let toks: Vec<String> = (0..3).map(|_| format!("w{}", rng.below(24))).collect();
                encode(&toks, &source, 4)
            })
            .collect();
        let refs: Vec<_> = seqs.iter().collect();
        let labels = [Label::Informative, Label::NotInformative];
        let total = model.param_count();
        let mut packed: Vec<f64> = Vec::with_capacity(total);
        for (_, values, _) in model.named_params() {
            packed.extend_from_slice(values);
        }
        let err = grad_check(
            |g, p| {
                let leaves = bind_packed(g, &model, p)?;
                let mut dropout_rng = Rng::new(0); // eval mode draws nothing
                let probs = model.forward(g, &leaves, &refs, false, &mut dropout_rng)?;
                batch_loss(g, probs, &labels)
            },
            &[1, total],
            &packed,
            1e-5,
        )
        .expect("full model grad_check");
        worst = worst.max(err);
    }
    Check {
        name: match kind {
            CellKind::BiLstm => "full bilstm classifier loss",
            CellKind::Gru => "full gru classifier loss",
        },
        error: worst,
        bound: 1e-4,
    }
}

fn mixture_cases_hold() -> bool {
    let p = |inf: f64| Prediction::new(inf, 1.0 - inf);
    let a = combine(&[p(0.8), p(0.2), p(0.6)], &[0.4, 0.2, 0.4]).expect("combine");
    let b = combine(&[p(0.9), p(0.1), p(0.9)], &[0.4, 0.2, 0.4]).expect("combine");
    let c = combine(&[p(0.7), p(0.7), p(0.7)], &[0.4, 0.2, 0.4]).expect("combine");
    (a.p_informative - 0.60).abs() < 1e-12
        && (b.p_informative - 0.74).abs() < 1e-12
        && (c.p_informative - 0.7).abs() < 1e-12
}

fn mask_invariance_holds() -> bool {
    let dim = 4;
    let source = toy_source(dim, 31337);
    let config = ClassifierConfig { hidden: 3, dense: 5, ..ClassifierConfig::default() };
    let mut rng = Rng::new(2024);
    for trial in 0..20 {
        let kind = if trial % 2 == 0 { CellKind::BiLstm } else { CellKind::Gru };
        let model = RecurrentClassifier::new(kind, "toy", dim, config, &mut rng);
        let n = rng.below(6);
        let toks: Vec<String> = (0..n).map(|_| format!("w{}", rng.below(24))).collect();
        let short = encode(&toks, &source, 6);
        let long = encode(&toks, &source, 12);
        let a = model.classify(&short, false, &mut rng).expect("classify");
        let b = model.classify(&long, false, &mut rng).expect("classify");
        if a.p_informative.to_bits() != b.p_informative.to_bits() {
            return false;
        }
    }
    true
}

pub fn cmd_selftest() -> CliResult<()> {
    let mut failed = false;
    let mut report = |name: &str, ok: bool, detail: String| {
        println!("{}  {name}{detail}", if ok { "ok  " } else { "FAIL" });
        failed |= !ok;
    };

    for check in primitive_checks().into_iter().chain(cell_checks()) {
        let ok = check.error < check.bound;
        report(check.name, ok, format!("  max grad error {:.3e} (bound {:.0e})", check.error, check.bound));
    }
    for kind in [CellKind::BiLstm, CellKind::Gru] {
        let check = full_model_check(kind);
        let ok = check.error < check.bound;
        report(check.name, ok, format!("  max grad error {:.3e} (bound {:.0e})", check.error, check.bound));
    }
    report("prediction mixture oracle", mixture_cases_hold(), String::new());
    report("padding mask invariance", mask_invariance_holds(), String::new());

    if failed {
        Err(CliError::Config("selftest failed".into()))
    } else {
        println!("selftest: all checks passed");
        Ok(())
    }
}
