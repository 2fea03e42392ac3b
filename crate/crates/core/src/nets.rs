//! LSTM/GRU cells, bidirectional sequence encoding, and the classifier
//! stack: embedding dropout, a recurrent layer with variational
//! input/state dropout, two dense layers with heavy dropout, and a
//! 2-way softmax output.
//!
//! Parameters live outside any graph as plain f64 buffers; each forward
//! pass binds them as leaf nodes, and the trainer reads gradients back
//! out of the graph after `backward`. Weight matrices are stored
//! row-major as (in × out) so a batch of row vectors multiplies straight
//! through.

use std::io::{BufRead, Write};

use crate::data::Label;
use crate::embeddings::EmbeddingSource;
use crate::rng::Rng;
use crate::tensor::{Graph, Result as TRes, Tensor};
use crate::text::{encode, preprocess, EncodedSequence, PipelineConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    BiLstm,
    Gru,
}

impl CellKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::BiLstm => "bilstm",
            CellKind::Gru => "gru",
        }
    }

    pub fn parse(s: &str) -> Option<CellKind> {
        match s {
            "bilstm" => Some(CellKind::BiLstm),
            "gru" => Some(CellKind::Gru),
            _ => None,
        }
    }
}

/// One gate: input weights (in×h), recurrent weights (h×h), bias (h).
#[derive(Debug, Clone)]
pub struct Gate {
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    pub b: Vec<f64>,
}

impl Gate {
    fn zeros(input_dim: usize, hidden: usize) -> Self {
        Gate {
            w: vec![0.0; input_dim * hidden],
            u: vec![0.0; hidden * hidden],
            b: vec![0.0; hidden],
        }
    }

    fn init(input_dim: usize, hidden: usize, bias: f64, rng: &mut Rng) -> Self {
        let limit = (6.0 / (input_dim + hidden) as f64).sqrt();
        let w = (0..input_dim * hidden).map(|_| rng.uniform(-limit, limit)).collect();
        let u = orthogonal(hidden, rng);
        let b = vec![bias; hidden];
        Gate { w, u, b }
    }
}

/// Square orthogonal matrix: Gram-Schmidt over rows of a normal draw.
fn orthogonal(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut m: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum();
            for k in 0..n {
                m[i * n + k] -= dot * m[j * n + k];
            }
        }
        let norm: f64 = (0..n).map(|k| m[i * n + k] * m[i * n + k]).sum::<f64>().sqrt();
        if norm < 1e-10 {
            for k in 0..n {
                m[i * n + k] = if k == i { 1.0 } else { 0.0 };
            }
        } else {
            for k in 0..n {
                m[i * n + k] /= norm;
            }
        }
    }
    m
}

/// LSTM gate order: forget, input, output, candidate.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub forget: Gate,
    pub input: Gate,
    pub output: Gate,
    pub candidate: Gate,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmParams {
            forget: Gate::zeros(input_dim, hidden),
            input: Gate::zeros(input_dim, hidden),
            output: Gate::zeros(input_dim, hidden),
            candidate: Gate::zeros(input_dim, hidden),
            input_dim,
            hidden,
        }
    }

    /// Glorot input weights, orthogonal recurrent weights, zero biases
    /// except the forget gate's, which starts at 1.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        LstmParams {
            forget: Gate::init(input_dim, hidden, 1.0, rng),
            input: Gate::init(input_dim, hidden, 0.0, rng),
            output: Gate::init(input_dim, hidden, 0.0, rng),
            candidate: Gate::init(input_dim, hidden, 0.0, rng),
            input_dim,
            hidden,
        }
    }

    fn gates(&self) -> [(&'static str, &Gate); 4] {
        [
            ("forget", &self.forget),
            ("input", &self.input),
            ("output", &self.output),
            ("candidate", &self.candidate),
        ]
    }

    fn gates_mut(&mut self) -> [(&'static str, &mut Gate); 4] {
        [
            ("forget", &mut self.forget),
            ("input", &mut self.input),
            ("output", &mut self.output),
            ("candidate", &mut self.candidate),
        ]
    }
}

/// GRU gate order: update, reset, candidate.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub update: Gate,
    pub reset: Gate,
    pub candidate: Gate,
    pub input_dim: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        GruParams {
            update: Gate::zeros(input_dim, hidden),
            reset: Gate::zeros(input_dim, hidden),
            candidate: Gate::zeros(input_dim, hidden),
            input_dim,
            hidden,
        }
    }

    pub fn init(input_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        GruParams {
            update: Gate::init(input_dim, hidden, 0.0, rng),
            reset: Gate::init(input_dim, hidden, 0.0, rng),
            candidate: Gate::init(input_dim, hidden, 0.0, rng),
            input_dim,
            hidden,
        }
    }

    fn gates(&self) -> [(&'static str, &Gate); 3] {
        [("update", &self.update), ("reset", &self.reset), ("candidate", &self.candidate)]
    }

    fn gates_mut(&mut self) -> [(&'static str, &mut Gate); 3] {
        [
            ("update", &mut self.update),
            ("reset", &mut self.reset),
            ("candidate", &mut self.candidate),
        ]
    }
}

#[derive(Debug, Clone)]
pub enum CellParams {
    Lstm(LstmParams),
    Gru(GruParams),
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Vec<f64>, // in×out
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense { w: vec![0.0; in_dim * out_dim], b: vec![0.0; out_dim], in_dim, out_dim }
    }

    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Dense {
            w: (0..in_dim * out_dim).map(|_| rng.uniform(-limit, limit)).collect(),
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }
}

/// Graph leaves for one gate.
#[derive(Clone, Copy)]
pub struct GateLeaves {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

/// Graph leaves for one cell (gate order as in the params).
pub struct CellLeaves {
    pub gates: Vec<GateLeaves>,
    hidden: usize,
}

impl CellLeaves {
    /// Assemble from already-bound gate leaves (LSTM order: forget,
    /// input, output, candidate; GRU order: update, reset, candidate).
    pub fn from_gates(gates: Vec<GateLeaves>, hidden: usize) -> Self {
        CellLeaves { gates, hidden }
    }
}

pub struct DenseLeaves {
    pub w: Tensor,
    pub b: Tensor,
}

pub struct ModelLeaves {
    pub fwd: CellLeaves,
    pub bwd: Option<CellLeaves>,
    pub fc1: DenseLeaves,
    pub fc2: DenseLeaves,
    pub out: DenseLeaves,
}

fn bind_gate(g: &mut Graph, gate: &Gate, input_dim: usize, hidden: usize, rg: bool) -> TRes<GateLeaves> {
    Ok(GateLeaves {
        w: g.leaf(&[input_dim, hidden], &gate.w, rg)?,
        u: g.leaf(&[hidden, hidden], &gate.u, rg)?,
        b: g.leaf(&[hidden], &gate.b, rg)?,
    })
}

pub fn bind_cell(g: &mut Graph, cell: &CellParams, rg: bool) -> TRes<CellLeaves> {
    let (gates, input_dim, hidden): (Vec<&Gate>, usize, usize) = match cell {
        CellParams::Lstm(p) => (p.gates().iter().map(|(_, g)| *g).collect(), p.input_dim, p.hidden),
        CellParams::Gru(p) => (p.gates().iter().map(|(_, g)| *g).collect(), p.input_dim, p.hidden),
    };
    let gates = gates
        .into_iter()
        .map(|gate| bind_gate(g, gate, input_dim, hidden, rg))
        .collect::<TRes<Vec<_>>>()?;
    Ok(CellLeaves { gates, hidden })
}

fn gate_pre(g: &mut Graph, gate: &GateLeaves, x: Tensor, h: Tensor) -> TRes<Tensor> {
    let xw = g.matmul(x, gate.w)?;
    let hu = g.matmul(h, gate.u)?;
    let s = g.add(xw, hu)?;
    g.add(s, gate.b)
}

/// One LSTM step. Gates are computed from `x` and `h_prev`; the carried
/// cell state is `c_prev`:
///
/// f = σ(xW_f + hU_f + b_f), i = σ(..), o = σ(..), c̃ = tanh(..),
/// c' = f⊙c_prev + i⊙c̃, h' = o⊙tanh(c').
pub fn lstm_step(
    g: &mut Graph,
    cell: &CellLeaves,
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
) -> TRes<(Tensor, Tensor)> {
    let [forget, input, output, candidate] = [&cell.gates[0], &cell.gates[1], &cell.gates[2], &cell.gates[3]];
    let f = {
        let p = gate_pre(g, forget, x, h_prev)?;
        g.sigmoid(p)?
    };
    let i = {
        let p = gate_pre(g, input, x, h_prev)?;
        g.sigmoid(p)?
    };
    let o = {
        let p = gate_pre(g, output, x, h_prev)?;
        g.sigmoid(p)?
    };
    let c_tilde = {
        let p = gate_pre(g, candidate, x, h_prev)?;
        g.tanh(p)?
    };
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, c_tilde)?;
    let c_new = g.add(keep, write)?;
    let ct = g.tanh(c_new)?;
    let h_new = g.mul(o, ct)?;
    Ok((h_new, c_new))
}

/// One GRU step:
///
/// z = σ(xW_z + hU_z + b_z), r = σ(xW_r + hU_r + b_r),
/// h̃ = tanh(xW_h + (r⊙h)U_h + b_h), h' = (1−z)⊙h + z⊙h̃.
pub fn gru_step(g: &mut Graph, cell: &CellLeaves, x: Tensor, h_prev: Tensor) -> TRes<Tensor> {
    gru_step_masked(g, cell, x, h_prev, None)
}

/// GRU step where gate computations see `rec_mask ⊙ h_prev` (variational
/// recurrent dropout) but the carry interpolation uses the raw state.
fn gru_step_masked(
    g: &mut Graph,
    cell: &CellLeaves,
    x: Tensor,
    h_prev: Tensor,
    rec_mask: Option<Tensor>,
) -> TRes<Tensor> {
    let [update, reset, candidate] = [&cell.gates[0], &cell.gates[1], &cell.gates[2]];
    let h_gates = match rec_mask {
        Some(m) => g.mul(h_prev, m)?,
        None => h_prev,
    };
    let z = {
        let p = gate_pre(g, update, x, h_gates)?;
        g.sigmoid(p)?
    };
    let r = {
        let p = gate_pre(g, reset, x, h_gates)?;
        g.sigmoid(p)?
    };
    let h_tilde = {
        let rh = g.mul(r, h_gates)?;
        let xw = g.matmul(x, candidate.w)?;
        let hu = g.matmul(rh, candidate.u)?;
        let s = g.add(xw, hu)?;
        let s = g.add(s, candidate.b)?;
        g.tanh(s)?
    };
    let ones = g.leaf(&[cell.hidden], &vec![1.0; cell.hidden], false)?;
    let one_minus_z = {
        let neg = g.scale(z, -1.0)?;
        g.add(neg, ones)?
    };
    let keep = g.mul(one_minus_z, h_prev)?;
    let step = g.mul(z, h_tilde)?;
    g.add(keep, step)
}

/// A two-class probability distribution for one post.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub p_informative: f64,
    pub p_not_informative: f64,
}

impl Prediction {
    pub fn new(p_informative: f64, p_not_informative: f64) -> Self {
        debug_assert!((p_informative + p_not_informative - 1.0).abs() < 1e-9);
        Prediction { p_informative, p_not_informative }
    }

    /// From a softmax row in class-index order [not_informative, informative].
    pub fn from_row(row: &[f64]) -> Self {
        Prediction { p_not_informative: row[0], p_informative: row[1] }
    }

    pub fn prob(&self, label: Label) -> f64 {
        match label {
            Label::Informative => self.p_informative,
            Label::NotInformative => self.p_not_informative,
        }
    }

    /// Ties resolve toward `NotInformative` (first class index).
    pub fn argmax(&self) -> Label {
        if self.p_informative > self.p_not_informative {
            Label::Informative
        } else {
            Label::NotInformative
        }
    }
}

/// Layer widths and dropout rates for the classifier stack. Defaults are
/// the full-size stack: hidden 300 per direction, dense 1024, dropout
/// 0.3 on embeddings and recurrent input/state, 0.8 on the dense layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub dense: usize,
    pub dropout_embed: f64,
    pub dropout_recurrent: f64,
    pub dropout_dense: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 300,
            dense: 1024,
            dropout_embed: 0.3,
            dropout_recurrent: 0.3,
            dropout_dense: 0.8,
        }
    }
}

/// Full model: one direction (GRU) or two (Bi-LSTM), then
/// fc1 → relu → dropout → fc2 → relu → dropout → out → softmax(2).
#[derive(Debug, Clone)]
pub struct RecurrentClassifier {
    pub cell_kind: CellKind,
    pub source_name: String,
    pub input_dim: usize,
    pub config: ClassifierConfig,
    fwd: CellParams,
    bwd: Option<CellParams>,
    fc1: Dense,
    fc2: Dense,
    out: Dense,
}

impl RecurrentClassifier {
    pub fn new(
        cell_kind: CellKind,
        source_name: &str,
        input_dim: usize,
        config: ClassifierConfig,
        rng: &mut Rng,
    ) -> Self {
        let (fwd, bwd) = match cell_kind {
            CellKind::BiLstm => (
                CellParams::Lstm(LstmParams::init(input_dim, config.hidden, rng)),
                Some(CellParams::Lstm(LstmParams::init(input_dim, config.hidden, rng))),
            ),
            CellKind::Gru => (CellParams::Gru(GruParams::init(input_dim, config.hidden, rng)), None),
        };
        let head_in = match cell_kind {
            CellKind::BiLstm => 2 * config.hidden,
            CellKind::Gru => config.hidden,
        };
        RecurrentClassifier {
            cell_kind,
            source_name: source_name.to_string(),
            input_dim,
            config,
            fwd,
            bwd,
            fc1: Dense::init(head_in, config.dense, rng),
            fc2: Dense::init(config.dense, config.dense, rng),
            out: Dense::init(config.dense, 2, rng),
        }
    }

    pub fn head_input_dim(&self) -> usize {
        match self.cell_kind {
            CellKind::BiLstm => 2 * self.config.hidden,
            CellKind::Gru => self.config.hidden,
        }
    }

    /// Replace the output layer with zeros (testing hook: makes every
    /// prediction (0.5, 0.5)).
    pub fn zero_output_layer(&mut self) {
        self.out = Dense::zeros(self.out.in_dim, self.out.out_dim);
    }

    /// Named parameter buffers in canonical order. The same order is used
    /// by [`RecurrentClassifier::bind`], the optimizer, and checkpoints.
    pub fn named_params(&self) -> Vec<(String, &Vec<f64>, (usize, usize))> {
        let mut out = Vec::new();
        named_cell_params("fwd", &self.fwd, &mut out);
        if let Some(bwd) = &self.bwd {
            named_cell_params("bwd", bwd, &mut out);
        }
        for (name, dense) in [("fc1", &self.fc1), ("fc2", &self.fc2), ("out", &self.out)] {
            out.push((format!("{name}.w"), &dense.w, (dense.in_dim, dense.out_dim)));
            out.push((format!("{name}.b"), &dense.b, (1, dense.out_dim)));
        }
        out
    }

    /// Mutable views of the parameter buffers, in canonical order.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        cell_params_mut(&mut self.fwd, &mut out);
        if let Some(bwd) = &mut self.bwd {
            cell_params_mut(bwd, &mut out);
        }
        for dense in [&mut self.fc1, &mut self.fc2, &mut self.out] {
            out.push(&mut dense.w);
            out.push(&mut dense.b);
        }
        out
    }

    /// Bind every parameter as a graph leaf, in canonical order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> TRes<ModelLeaves> {
        let fwd = bind_cell(g, &self.fwd, trainable)?;
        let bwd = match &self.bwd {
            Some(cell) => Some(bind_cell(g, cell, trainable)?),
            None => None,
        };
        let bind_dense = |g: &mut Graph, d: &Dense| -> TRes<DenseLeaves> {
            Ok(DenseLeaves {
                w: g.leaf(&[d.in_dim, d.out_dim], &d.w, trainable)?,
                b: g.leaf(&[d.out_dim], &d.b, trainable)?,
            })
        };
        Ok(ModelLeaves {
            fwd,
            bwd,
            fc1: bind_dense(g, &self.fc1)?,
            fc2: bind_dense(g, &self.fc2)?,
            out: bind_dense(g, &self.out)?,
        })
    }

    /// The bound leaves flattened in canonical parameter order.
    pub fn leaves_in_order(leaves: &ModelLeaves) -> Vec<Tensor> {
        let mut out = Vec::new();
        let push_cell = |cell: &CellLeaves, out: &mut Vec<Tensor>| {
            for gate in &cell.gates {
                out.push(gate.w);
                out.push(gate.u);
                out.push(gate.b);
            }
        };
        push_cell(&leaves.fwd, &mut out);
        if let Some(bwd) = &leaves.bwd {
            push_cell(bwd, &mut out);
        }
        for dense in [&leaves.fc1, &leaves.fc2, &leaves.out] {
            out.push(dense.w);
            out.push(dense.b);
        }
        out
    }

    /// Run the full stack on a batch. Returns the B×2 probability rows in
    /// class-index order. In training mode `rng` drives the dropout draws;
    /// in eval mode dropout vanishes and `rng` is unused.
    pub fn forward(
        &self,
        g: &mut Graph,
        leaves: &ModelLeaves,
        seqs: &[&EncodedSequence],
        training: bool,
        rng: &mut Rng,
    ) -> TRes<Tensor> {
        let features = self.recurrent_features(g, leaves, seqs, training, rng)?;
        let a1 = {
            let lin = g.matmul(features, leaves.fc1.w)?;
            let lin = g.add(lin, leaves.fc1.b)?;
            let act = g.relu(lin)?;
            g.dropout(act, self.config.dropout_dense, training, rng)?
        };
        let a2 = {
            let lin = g.matmul(a1, leaves.fc2.w)?;
            let lin = g.add(lin, leaves.fc2.b)?;
            let act = g.relu(lin)?;
            g.dropout(act, self.config.dropout_dense, training, rng)?
        };
        let logits = {
            let lin = g.matmul(a2, leaves.out.w)?;
            g.add(lin, leaves.out.b)?
        };
        g.softmax(logits)
    }

    /// The recurrent encoder alone: runs the forward cell over valid
    /// positions (and, for bilstm, the backward cell over them reversed)
    /// and returns the concatenated final states, B × 2·hidden for bilstm
    /// and B × hidden for gru. Zero-length sequences keep the zero state;
    /// masked positions never reach the cells.
    pub fn recurrent_features(
        &self,
        g: &mut Graph,
        leaves: &ModelLeaves,
        seqs: &[&EncodedSequence],
        training: bool,
        rng: &mut Rng,
    ) -> TRes<Tensor> {
        assert!(!seqs.is_empty());
        let batch = seqs.len();
        let in_dim = self.input_dim;
        let hidden = self.config.hidden;
        let t_eff = seqs.iter().map(|s| s.length()).max().unwrap();

        // Token rows per timestep, with embedding dropout in training.
        let mut xs = Vec::with_capacity(t_eff);
        let mut gatings: Vec<Option<(Tensor, Tensor)>> = Vec::with_capacity(t_eff);
        for t in 0..t_eff {
            let mut vals = vec![0.0; batch * in_dim];
            let mut mask = vec![0.0; batch];
            let mut all_valid = true;
            for (b, seq) in seqs.iter().enumerate() {
                if t < seq.length() {
                    vals[b * in_dim..(b + 1) * in_dim].copy_from_slice(seq.row(t));
                    mask[b] = 1.0;
                } else {
                    all_valid = false;
                }
            }
            let leaf = g.leaf(&[batch, in_dim], &vals, false)?;
            let x = g.dropout(leaf, self.config.dropout_embed, training, rng)?;
            xs.push(x);
            gatings.push(if all_valid {
                None
            } else {
                let inv: Vec<f64> = mask.iter().map(|&m| 1.0 - m).collect();
                let m = g.leaf(&[batch, 1], &mask, false)?;
                let i = g.leaf(&[batch, 1], &inv, false)?;
                Some((m, i))
            });
        }

        let sample_masks = |g: &mut Graph, rng: &mut Rng| -> TRes<(Option<Tensor>, Option<Tensor>)> {
            if !training || self.config.dropout_recurrent == 0.0 {
                return Ok((None, None));
            }
            let rate = self.config.dropout_recurrent;
            let keep = 1.0 / (1.0 - rate);
            let draw = |g: &mut Graph, rows: usize, cols: usize, rng: &mut Rng| -> TRes<Tensor> {
                let vals: Vec<f64> = (0..rows * cols)
                    .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
                    .collect();
                g.leaf(&[rows, cols], &vals, false)
            };
            let in_mask = draw(g, batch, in_dim, rng)?;
            let rec_mask = draw(g, batch, hidden, rng)?;
            Ok((Some(in_mask), Some(rec_mask)))
        };

        let run = |g: &mut Graph,
                   cell: &CellLeaves,
                   is_lstm: bool,
                   reverse: bool,
                   in_mask: Option<Tensor>,
                   rec_mask: Option<Tensor>|
         -> TRes<Tensor> {
            let zeros = vec![0.0; batch * hidden];
            let mut h = g.leaf(&[batch, hidden], &zeros, false)?;
            let mut c = if is_lstm { Some(g.leaf(&[batch, hidden], &zeros, false)?) } else { None };
            let order: Vec<usize> =
                if reverse { (0..t_eff).rev().collect() } else { (0..t_eff).collect() };
            for t in order {
                let x = match in_mask {
                    Some(m) => g.mul(xs[t], m)?,
                    None => xs[t],
                };
                let (h_new, c_new) = if is_lstm {
                    let h_gates = match rec_mask {
                        Some(m) => g.mul(h, m)?,
                        None => h,
                    };
                    let (hn, cn) = lstm_step(g, cell, x, h_gates, c.unwrap())?;
                    (hn, Some(cn))
                } else {
                    (gru_step_masked(g, cell, x, h, rec_mask)?, None)
                };
                match gatings[t] {
                    None => {
                        h = h_new;
                        c = c_new;
                    }
                    Some((m, inv)) => {
                        let keep_h = g.mul(inv, h)?;
                        let step_h = g.mul(m, h_new)?;
                        h = g.add(keep_h, step_h)?;
                        if let (Some(c_old), Some(c_new)) = (c, c_new) {
                            let keep_c = g.mul(inv, c_old)?;
                            let step_c = g.mul(m, c_new)?;
                            c = Some(g.add(keep_c, step_c)?);
                        }
                    }
                }
            }
            Ok(h)
        };

        match (&self.cell_kind, &leaves.bwd) {
            (CellKind::BiLstm, Some(bwd)) => {
                let (in_f, rec_f) = sample_masks(g, rng)?;
                let h_f = run(g, &leaves.fwd, true, false, in_f, rec_f)?;
                let (in_b, rec_b) = sample_masks(g, rng)?;
                let h_b = run(g, bwd, true, true, in_b, rec_b)?;
                g.concat(1, &[h_f, h_b])
            }
            (CellKind::Gru, _) => {
                let (in_f, rec_f) = sample_masks(g, rng)?;
                run(g, &leaves.fwd, false, false, in_f, rec_f)
            }
            _ => unreachable!("bilstm models always carry a backward cell"),
        }
    }

    /// Eval-mode encoder features for one sequence.
    pub fn features(&self, seq: &EncodedSequence) -> TRes<Vec<f64>> {
        let mut g = Graph::new();
        let leaves = self.bind(&mut g, false)?;
        let mut rng = Rng::new(0);
        let features = self.recurrent_features(&mut g, &leaves, &[seq], false, &mut rng)?;
        Ok(g.values(features).to_vec())
    }

    /// Classify one encoded sequence. Training mode draws dropout from
    /// `rng`; eval mode is deterministic.
    pub fn classify(
        &self,
        seq: &EncodedSequence,
        training: bool,
        rng: &mut Rng,
    ) -> TRes<Prediction> {
        let mut g = Graph::new();
        let leaves = self.bind(&mut g, false)?;
        let probs = self.forward(&mut g, &leaves, &[seq], training, rng)?;
        Ok(Prediction::from_row(g.values(probs)))
    }

    /// Eval-mode predictions for many sequences, batched internally.
    pub fn classify_batch(&self, seqs: &[&EncodedSequence]) -> TRes<Vec<Prediction>> {
        let mut rng = Rng::new(0); // unused in eval mode
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            let mut g = Graph::new();
            let leaves = self.bind(&mut g, false)?;
            let probs = self.forward(&mut g, &leaves, chunk, false, &mut rng)?;
            let vals = g.values(probs);
            for b in 0..chunk.len() {
                out.push(Prediction::from_row(&vals[b * 2..b * 2 + 2]));
            }
        }
        Ok(out)
    }

    /// Preprocess, encode against `source`, and classify in eval mode.
    pub fn classify_text(
        &self,
        text: &str,
        source: &EmbeddingSource,
        pipe: &PipelineConfig,
    ) -> TRes<Prediction> {
        let tokens = preprocess(text, &pipe.stopwords);
        let seq = encode(&tokens, source, pipe.max_len);
        let mut rng = Rng::new(0);
        self.classify(&seq, false, &mut rng)
    }
}

impl RecurrentClassifier {
    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, v, _)| v.len()).sum()
    }
}

/// Carve a packed single-row leaf into model leaves following `model`'s
/// canonical parameter order and shapes. The packed tensor must hold
/// exactly [`RecurrentClassifier::param_count`] values; gradient
/// checkers use this to differentiate a whole model at once.
pub fn bind_packed(
    g: &mut Graph,
    model: &RecurrentClassifier,
    packed: Tensor,
) -> TRes<ModelLeaves> {
    let shapes: Vec<(usize, usize)> =
        model.named_params().iter().map(|(_, _, shape)| *shape).collect();
    let mut offset = 0;
    let mut carved: Vec<Tensor> = Vec::with_capacity(shapes.len());
    for (rows, cols) in shapes {
        let piece = g.slice(packed, 1, offset, rows * cols)?;
        offset += rows * cols;
        carved.push(g.reshape(piece, &[rows, cols])?);
    }
    let mut it = carved.into_iter();
    let mut take_cell = |n_gates: usize| -> CellLeaves {
        let gates = (0..n_gates)
            .map(|_| GateLeaves {
                w: it.next().expect("gate w"),
                u: it.next().expect("gate u"),
                b: it.next().expect("gate b"),
            })
            .collect();
        CellLeaves { gates, hidden: model.config.hidden }
    };
    let n_gates = match model.cell_kind {
        CellKind::BiLstm => 4,
        CellKind::Gru => 3,
    };
    let fwd = take_cell(n_gates);
    let bwd = match model.cell_kind {
        CellKind::BiLstm => Some(take_cell(n_gates)),
        CellKind::Gru => None,
    };
    let mut take_dense = || DenseLeaves {
        w: it.next().expect("dense w"),
        b: it.next().expect("dense b"),
    };
    Ok(ModelLeaves { fwd, bwd, fc1: take_dense(), fc2: take_dense(), out: take_dense() })
}

fn named_cell_params<'a>(
    prefix: &str,
    cell: &'a CellParams,
    out: &mut Vec<(String, &'a Vec<f64>, (usize, usize))>,
) {
    let (gates, in_dim, hidden): (Vec<(&str, &Gate)>, usize, usize) = match cell {
        CellParams::Lstm(p) => (p.gates().to_vec(), p.input_dim, p.hidden),
        CellParams::Gru(p) => (p.gates().to_vec(), p.input_dim, p.hidden),
    };
    for (name, gate) in gates {
        out.push((format!("{prefix}.{name}.w"), &gate.w, (in_dim, hidden)));
        out.push((format!("{prefix}.{name}.u"), &gate.u, (hidden, hidden)));
        out.push((format!("{prefix}.{name}.b"), &gate.b, (1, hidden)));
    }
}

fn cell_params_mut<'a>(cell: &'a mut CellParams, out: &mut Vec<&'a mut Vec<f64>>) {
    let gates: Vec<&mut Gate> = match cell {
        CellParams::Lstm(p) => p.gates_mut().map(|(_, g)| g).into_iter().collect(),
        CellParams::Gru(p) => p.gates_mut().map(|(_, g)| g).into_iter().collect(),
    };
    for gate in gates {
        out.push(&mut gate.w);
        out.push(&mut gate.u);
        out.push(&mut gate.b);
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pipeline settings a checkpoint was trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub max_len: usize,
    pub pipeline_fingerprint: u64,
}

/// Text checkpoint: a manifest section followed by named parameter
/// blocks, one value row per line in shortest round-trip decimal form.
pub fn save_checkpoint<W: Write>(
    model: &RecurrentClassifier,
    meta: &CheckpointMeta,
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "embercast checkpoint v1")?;
    writeln!(w, "cell_kind {}", model.cell_kind.as_str())?;
    writeln!(w, "source {}", model.source_name)?;
    writeln!(w, "input_dim {}", model.input_dim)?;
    writeln!(w, "hidden {}", model.config.hidden)?;
    writeln!(w, "dense {}", model.config.dense)?;
    writeln!(w, "dropout_embed {:?}", model.config.dropout_embed)?;
    writeln!(w, "dropout_recurrent {:?}", model.config.dropout_recurrent)?;
    writeln!(w, "dropout_dense {:?}", model.config.dropout_dense)?;
    writeln!(w, "max_len {}", meta.max_len)?;
    writeln!(w, "pipeline_fingerprint {:#018x}", meta.pipeline_fingerprint)?;
    for (name, values, (rows, cols)) in model.named_params() {
        writeln!(w, "param {name} {rows} {cols}")?;
        for r in 0..rows {
            let mut line = String::new();
            for v in &values[r * cols..(r + 1) * cols] {
                if !line.is_empty() {
                    line.push(' ');
                }
                line.push_str(&format!("{v:?}"));
            }
            writeln!(w, "{line}")?;
        }
    }
    writeln!(w, "end")?;
    Ok(())
}

pub fn load_checkpoint<R: BufRead>(
    reader: R,
) -> Result<(RecurrentClassifier, CheckpointMeta), CheckpointError> {
    let mut lines = reader.lines().enumerate();
    let next = |lines: &mut std::iter::Enumerate<std::io::Lines<R>>| -> Result<(usize, String), CheckpointError> {
        match lines.next() {
            Some((i, line)) => Ok((i + 1, line?)),
            None => Err(CheckpointError::Parse { line: 0, msg: "unexpected end of file".into() }),
        }
    };
    let (line_no, magic) = next(&mut lines)?;
    if magic != "embercast checkpoint v1" {
        return Err(CheckpointError::Parse { line: line_no, msg: format!("bad magic {magic:?}") });
    }

    let mut fields = std::collections::HashMap::new();
    let pending_param: Option<(usize, String, usize, usize)> = loop {
        let (line_no, line) = next(&mut lines)?;
        if let Some(rest) = line.strip_prefix("param ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            if parts.len() != 3 {
                return Err(CheckpointError::Parse { line: line_no, msg: "malformed param header".into() });
            }
            let rows = parts[1].parse().map_err(|_| CheckpointError::Parse {
                line: line_no,
                msg: "bad row count".into(),
            })?;
            let cols = parts[2].parse().map_err(|_| CheckpointError::Parse {
                line: line_no,
                msg: "bad column count".into(),
            })?;
            break Some((line_no, parts[0].to_string(), rows, cols));
        }
        let Some((key, value)) = line.split_once(' ') else {
            return Err(CheckpointError::Parse { line: line_no, msg: format!("bad manifest line {line:?}") });
        };
        fields.insert(key.to_string(), value.to_string());
    };

    let get = |key: &str| -> Result<&String, CheckpointError> {
        fields.get(key).ok_or_else(|| CheckpointError::Parse {
            line: 0,
            msg: format!("manifest missing {key}"),
        })
    };
    let parse_usize = |key: &str| -> Result<usize, CheckpointError> {
        get(key)?.parse().map_err(|_| CheckpointError::Parse {
            line: 0,
            msg: format!("bad integer for {key}"),
        })
    };
    let parse_f64 = |key: &str| -> Result<f64, CheckpointError> {
        get(key)?.parse().map_err(|_| CheckpointError::Parse {
            line: 0,
            msg: format!("bad number for {key}"),
        })
    };

    let cell_kind = CellKind::parse(get("cell_kind")?).ok_or_else(|| CheckpointError::Parse {
        line: 0,
        msg: "unknown cell_kind".into(),
    })?;
    let source_name = get("source")?.clone();
    let input_dim = parse_usize("input_dim")?;
    let config = ClassifierConfig {
        hidden: parse_usize("hidden")?,
        dense: parse_usize("dense")?,
        dropout_embed: parse_f64("dropout_embed")?,
        dropout_recurrent: parse_f64("dropout_recurrent")?,
        dropout_dense: parse_f64("dropout_dense")?,
    };
    let max_len = parse_usize("max_len")?;
    let fingerprint_text = get("pipeline_fingerprint")?;
    let pipeline_fingerprint = u64::from_str_radix(
        fingerprint_text.trim_start_matches("0x"),
        16,
    )
    .map_err(|_| CheckpointError::Parse { line: 0, msg: "bad pipeline_fingerprint".into() })?;

    // Skeleton with the right shapes; parameter blocks overwrite it.
    let mut rng = Rng::new(0);
    let mut model = RecurrentClassifier::new(cell_kind, &source_name, input_dim, config, &mut rng);

    let expected: Vec<(String, usize)> = model
        .named_params()
        .iter()
        .map(|(name, values, _)| (name.clone(), values.len()))
        .collect();
    let mut buffers = model.params_mut();

    let mut param_index = 0;
    let mut current = pending_param;
    while let Some((header_line, name, rows, cols)) = current.take() {
        if param_index >= expected.len() {
            return Err(CheckpointError::Parse {
                line: header_line,
                msg: format!("unexpected extra param {name}"),
            });
        }
        let (ref expected_name, expected_len) = expected[param_index];
        if &name != expected_name || rows * cols != expected_len {
            return Err(CheckpointError::Parse {
                line: header_line,
                msg: format!(
                    "expected param {expected_name} of {expected_len} values, found {name} ({rows}x{cols})"
                ),
            });
        }
        let buf = &mut buffers[param_index];
        let mut filled = 0;
        for _ in 0..rows {
            let (line_no, line) = next(&mut lines)?;
            for field in line.split(' ') {
                if filled >= expected_len {
                    return Err(CheckpointError::Parse { line: line_no, msg: "too many values".into() });
                }
                buf[filled] = field.parse().map_err(|_| CheckpointError::Parse {
                    line: line_no,
                    msg: format!("bad value {field:?}"),
                })?;
                filled += 1;
            }
        }
        if filled != expected_len {
            return Err(CheckpointError::Parse {
                line: header_line,
                msg: format!("param {name}: {filled} of {expected_len} values"),
            });
        }
        param_index += 1;

        let (line_no, line) = next(&mut lines)?;
        if line == "end" {
            break;
        }
        let Some(rest) = line.strip_prefix("param ") else {
            return Err(CheckpointError::Parse { line: line_no, msg: format!("expected param or end, got {line:?}") });
        };
        let parts: Vec<&str> = rest.split(' ').collect();
        if parts.len() != 3 {
            return Err(CheckpointError::Parse { line: line_no, msg: "malformed param header".into() });
        }
        let rows = parts[1].parse().map_err(|_| CheckpointError::Parse { line: line_no, msg: "bad row count".into() })?;
        let cols = parts[2].parse().map_err(|_| CheckpointError::Parse { line: line_no, msg: "bad column count".into() })?;
        current = Some((line_no, parts[0].to_string(), rows, cols));
    }
    if param_index != expected.len() {
        return Err(CheckpointError::Parse {
            line: 0,
            msg: format!("checkpoint has {param_index} of {} params", expected.len()),
        });
    }
    drop(buffers);
    Ok((model, CheckpointMeta { max_len, pipeline_fingerprint }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::WordVectors;
    use crate::tensor::grad_check;
    use crate::text::Stopwords;
    use std::sync::Arc;

    fn graph_cell(g: &mut Graph, cell: &CellParams) -> CellLeaves {
        bind_cell(g, cell, false).unwrap()
    }

    fn vec_leaf(g: &mut Graph, values: &[f64]) -> Tensor {
        g.leaf(&[1, values.len()], values, false).unwrap()
    }

    #[test]
    fn lstm_zero_params_zero_state() {
        let mut g = Graph::new();
        let cell = graph_cell(&mut g, &CellParams::Lstm(LstmParams::zeros(2, 3)));
        let x = vec_leaf(&mut g, &[0.0, 0.0]);
        let h = vec_leaf(&mut g, &[0.0, 0.0, 0.0]);
        let c = vec_leaf(&mut g, &[0.0, 0.0, 0.0]);
        let (h1, c1) = lstm_step(&mut g, &cell, x, h, c).unwrap();
        assert_eq!(g.values(h1), &[0.0, 0.0, 0.0]);
        assert_eq!(g.values(c1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn lstm_zero_params_carries_half_cell_state() {
        // all gates sit at sigma(0)=0.5 and the candidate at tanh(0)=0, so
        // c' = 0.5*c and h' = 0.5*tanh(c').
        let mut g = Graph::new();
        let cell = graph_cell(&mut g, &CellParams::Lstm(LstmParams::zeros(1, 1)));
        let x = vec_leaf(&mut g, &[0.0]);
        let h = vec_leaf(&mut g, &[0.0]);
        let c = vec_leaf(&mut g, &[2.0]);
        let (h1, c1) = lstm_step(&mut g, &cell, x, h, c).unwrap();
        assert!((g.values(c1)[0] - 1.0).abs() < 1e-15);
        let expected_h = 0.5 * 1.0_f64.tanh();
        assert!((g.values(h1)[0] - expected_h).abs() < 1e-15);
        assert!((g.values(h1)[0] - 0.380797).abs() < 1e-6);
    }

    #[test]
    fn gru_zero_params_halves_state() {
        let mut g = Graph::new();
        let cell = graph_cell(&mut g, &CellParams::Gru(GruParams::zeros(2, 1)));
        let x = vec_leaf(&mut g, &[0.7, -0.3]);
        let h = vec_leaf(&mut g, &[4.0]);
        let h1 = gru_step(&mut g, &cell, x, h).unwrap();
        assert!((g.values(h1)[0] - 2.0).abs() < 1e-12);

        let h0 = vec_leaf(&mut g, &[0.0]);
        let h1 = gru_step(&mut g, &cell, x, h0).unwrap();
        assert_eq!(g.values(h1), &[0.0]);
    }

    // Pack gates + inputs into one flat vector so grad_check exercises
    // every parameter and input of a cell step at once.
    fn carve(g: &mut Graph, packed: Tensor, offset: &mut usize, rows: usize, cols: usize) -> Tensor {
        let s = g.slice(packed, 1, *offset, rows * cols).unwrap();
        *offset += rows * cols;
        g.reshape(s, &[rows, cols]).unwrap()
    }

    fn carve_gates(
        g: &mut Graph,
        packed: Tensor,
        offset: &mut usize,
        n_gates: usize,
        input_dim: usize,
        hidden: usize,
    ) -> CellLeaves {
        let gates = (0..n_gates)
            .map(|_| {
                let w = carve(g, packed, offset, input_dim, hidden);
                let u = carve(g, packed, offset, hidden, hidden);
                let b = carve(g, packed, offset, 1, hidden);
                GateLeaves { w, u, b }
            })
            .collect();
        CellLeaves { gates, hidden }
    }

    #[test]
    fn lstm_step_gradients_check_out() {
        let (input_dim, hidden) = (3, 4);
        let per_gate = input_dim * hidden + hidden * hidden + hidden;
        let total = 4 * per_gate + input_dim + 2 * hidden;
        for seed in 0..10 {
            let mut rng = Rng::new(3500 + seed);
            let packed: Vec<f64> = (0..total).map(|_| rng.uniform(-0.8, 0.8)).collect();
            let err = grad_check(
                |g, p| {
                    let mut off = 0;
                    let cell = carve_gates(g, p, &mut off, 4, input_dim, hidden);
                    let x = carve(g, p, &mut off, 1, input_dim);
                    let h = carve(g, p, &mut off, 1, hidden);
                    let c = carve(g, p, &mut off, 1, hidden);
                    let (h1, _c1) = lstm_step(g, &cell, x, h, c)?;
                    g.sum(h1)
                },
                &[1, total],
                &packed,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn gru_step_gradients_check_out() {
        let (input_dim, hidden) = (3, 4);
        let per_gate = input_dim * hidden + hidden * hidden + hidden;
        let total = 3 * per_gate + input_dim + hidden;
        for seed in 0..10 {
            let mut rng = Rng::new(3500 + seed);
            let packed: Vec<f64> = (0..total).map(|_| rng.uniform(-0.8, 0.8)).collect();
            let err = grad_check(
                |g, p| {
                    let mut off = 0;
                    let cell = carve_gates(g, p, &mut off, 3, input_dim, hidden);
                    let x = carve(g, p, &mut off, 1, input_dim);
                    let h = carve(g, p, &mut off, 1, hidden);
                    let h1 = gru_step(g, &cell, x, h)?;
                    g.sum(h1)
                },
                &[1, total],
                &packed,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn lstm_hidden_state_is_bounded() {
        let mut rng = Rng::new(5150);
        for _ in 0..20 {
            let params = LstmParams::init(3, 5, &mut rng);
            let mut g = Graph::new();
            let cell = graph_cell(&mut g, &CellParams::Lstm(params));
            let x: Vec<f64> = (0..3).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let h: Vec<f64> = (0..5).map(|_| rng.uniform(-0.9, 0.9)).collect();
            let c: Vec<f64> = (0..5).map(|_| rng.uniform(-4.0, 4.0)).collect();
            let (xt, ht, ct) = (vec_leaf(&mut g, &x), vec_leaf(&mut g, &h), vec_leaf(&mut g, &c));
            let (h1, _) = lstm_step(&mut g, &cell, xt, ht, ct).unwrap();
            assert!(g.values(h1).iter().all(|v| v.abs() < 1.0));
        }
    }

    fn fold_lstm(params: &LstmParams, rows: &[Vec<f64>]) -> Vec<f64> {
        let mut g = Graph::new();
        let cell = graph_cell(&mut g, &CellParams::Lstm(params.clone()));
        let mut h = vec_leaf(&mut g, &vec![0.0; params.hidden]);
        let mut c = vec_leaf(&mut g, &vec![0.0; params.hidden]);
        for row in rows {
            let x = vec_leaf(&mut g, row);
            let (hn, cn) = lstm_step(&mut g, &cell, x, h, c).unwrap();
            h = hn;
            c = cn;
        }
        g.values(h).to_vec()
    }

    #[test]
    fn identical_cells_on_palindrome_agree() {
        let mut rng = Rng::new(88);
        let params = LstmParams::init(2, 3, &mut rng);
        let a = vec![0.3, -0.4];
        let b = vec![1.1, 0.2];
        let palindrome = vec![a.clone(), b.clone(), a.clone()];
        let reversed: Vec<Vec<f64>> = palindrome.iter().rev().cloned().collect();
        assert_eq!(fold_lstm(&params, &palindrome), fold_lstm(&params, &reversed));
    }

    #[test]
    fn backward_direction_is_forward_on_reversed_input() {
        let mut rng = Rng::new(89);
        let params = LstmParams::init(2, 3, &mut rng);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let reversed: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();

        // hidden sequence forward over reversed input
        let mut g = Graph::new();
        let cell = graph_cell(&mut g, &CellParams::Lstm(params.clone()));
        let mut h = vec_leaf(&mut g, &[0.0; 3]);
        let mut c = vec_leaf(&mut g, &[0.0; 3]);
        let mut fwd_on_rev = Vec::new();
        for row in &reversed {
            let x = vec_leaf(&mut g, row);
            let (hn, cn) = lstm_step(&mut g, &cell, x, h, c).unwrap();
            h = hn;
            c = cn;
            fwd_on_rev.push(g.values(h).to_vec());
        }

        // a right-to-left pass over the original input
        let mut g2 = Graph::new();
        let cell2 = graph_cell(&mut g2, &CellParams::Lstm(params));
        let mut h2 = vec_leaf(&mut g2, &[0.0; 3]);
        let mut c2 = vec_leaf(&mut g2, &[0.0; 3]);
        let mut bwd_states = Vec::new();
        for row in rows.iter().rev() {
            let x = vec_leaf(&mut g2, row);
            let (hn, cn) = lstm_step(&mut g2, &cell2, x, h2, c2).unwrap();
            h2 = hn;
            c2 = cn;
            bwd_states.push(g2.values(h2).to_vec());
        }

        assert_eq!(fwd_on_rev, bwd_states);
    }

    fn toy_source(dim: usize, seed: u64) -> EmbeddingSource {
        let mut rng = Rng::new(seed);
        let rows: Vec<(String, Vec<f64>)> = (0..30)
            .map(|i| (format!("w{i}"), (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect()))
            .collect();
        EmbeddingSource::Single(Arc::new(WordVectors::from_rows("toy", dim, rows)))
    }

    fn small_config() -> ClassifierConfig {
        ClassifierConfig { hidden: 4, dense: 6, ..ClassifierConfig::default() }
    }

    fn tokens(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn encoder_features_have_zero_state_for_empty_input() {
        let mut rng = Rng::new(19);
        let source = toy_source(3, 12);
        let empty = encode(&[], &source, 4);
        let bilstm = RecurrentClassifier::new(CellKind::BiLstm, "toy", 3, small_config(), &mut rng);
        let f = bilstm.features(&empty).unwrap();
        assert_eq!(f, vec![0.0; 8]); // 2 × hidden
        let gru = RecurrentClassifier::new(CellKind::Gru, "toy", 3, small_config(), &mut rng);
        let f = gru.features(&empty).unwrap();
        assert_eq!(f, vec![0.0; 4]);
    }

    #[test]
    fn mirrored_cells_agree_on_palindromes() {
        let mut rng = Rng::new(23);
        let source = toy_source(3, 13);
        let mut model = RecurrentClassifier::new(CellKind::BiLstm, "toy", 3, small_config(), &mut rng);
        model.bwd = Some(model.fwd.clone());
        let palindrome = tokens(&["w1", "w7", "w3", "w7", "w1"]);
        let seq = encode(&palindrome, &source, 6);
        let f = model.features(&seq).unwrap();
        let (fwd_half, bwd_half) = f.split_at(f.len() / 2);
        assert_eq!(fwd_half, bwd_half);
    }

    #[test]
    fn encoder_features_ignore_extra_padding() {
        let mut rng = Rng::new(29);
        let source = toy_source(3, 14);
        let model = RecurrentClassifier::new(CellKind::BiLstm, "toy", 3, small_config(), &mut rng);
        let toks = tokens(&["w2", "w4"]);
        let a = model.features(&encode(&toks, &source, 3)).unwrap();
        let b = model.features(&encode(&toks, &source, 9)).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn zero_output_layer_predicts_even_split() {
        let mut rng = Rng::new(7);
        let source = toy_source(3, 1);
        for kind in [CellKind::BiLstm, CellKind::Gru] {
            let mut model = RecurrentClassifier::new(kind, "toy", 3, small_config(), &mut rng);
            model.zero_output_layer();
            let seq = encode(&tokens(&["w1", "w2"]), &source, 5);
            let p = model.classify(&seq, false, &mut rng).unwrap();
            assert_eq!(p.p_informative, 0.5);
            assert_eq!(p.p_not_informative, 0.5);
            assert_eq!(p.argmax(), Label::NotInformative); // tie rule
        }
    }

    #[test]
    fn predictions_are_distributions() {
        let mut rng = Rng::new(21);
        let source = toy_source(4, 2);
        for kind in [CellKind::BiLstm, CellKind::Gru] {
            for seed in 0..5 {
                let mut init = Rng::new(seed);
                let model = RecurrentClassifier::new(kind, "toy", 4, small_config(), &mut init);
                let n = 1 + rng.below(6);
                let toks: Vec<String> = (0..n).map(|_| format!("w{}", rng.below(30))).collect();
                let seq = encode(&toks, &source, 8);
                let p = model.classify(&seq, false, &mut rng).unwrap();
                assert!((p.p_informative + p.p_not_informative - 1.0).abs() < 1e-9);
                assert!(p.p_informative >= 0.0 && p.p_informative <= 1.0);
            }
        }
    }

    #[test]
    fn empty_sequence_uses_zero_state() {
        let mut rng = Rng::new(3);
        let source = toy_source(3, 4);
        let model = RecurrentClassifier::new(CellKind::BiLstm, "toy", 3, small_config(), &mut rng);
        let seq = encode(&[], &source, 6);
        // zero features meet zero biases: an even split
        let p = model.classify(&seq, false, &mut rng).unwrap();
        assert_eq!((p.p_informative, p.p_not_informative), (0.5, 0.5));
    }

    #[test]
    fn padding_never_changes_eval_prediction() {
        let mut rng = Rng::new(31);
        let source = toy_source(4, 5);
        for kind in [CellKind::BiLstm, CellKind::Gru] {
            for seed in 0..10 {
                let mut init = Rng::new(400 + seed);
                let model = RecurrentClassifier::new(kind, "toy", 4, small_config(), &mut init);
                let n = rng.below(6);
                let toks: Vec<String> = (0..n).map(|_| format!("w{}", rng.below(30))).collect();
                let short = encode(&toks, &source, 6);
                let long = encode(&toks, &source, 17);
                let p1 = model.classify(&short, false, &mut rng).unwrap();
                let p2 = model.classify(&long, false, &mut rng).unwrap();
                assert_eq!(p1.p_informative.to_bits(), p2.p_informative.to_bits());
                assert_eq!(p1.p_not_informative.to_bits(), p2.p_not_informative.to_bits());
            }
        }
    }

    #[test]
    fn batched_eval_matches_single_eval() {
        let mut rng = Rng::new(47);
        let source = toy_source(4, 6);
        let model = RecurrentClassifier::new(CellKind::BiLstm, "toy", 4, small_config(), &mut rng);
        let seqs: Vec<EncodedSequence> = (0..7)
            .map(|_| {
                let n = rng.below(6);
                let toks: Vec<String> = (0..n).map(|_| format!("w{}", rng.below(30))).collect();
                encode(&toks, &source, 6)
            })
            .collect();
        let refs: Vec<&EncodedSequence> = seqs.iter().collect();
        let batched = model.classify_batch(&refs).unwrap();
        for (seq, b) in seqs.iter().zip(&batched) {
            let single = model.classify(seq, false, &mut rng).unwrap();
            assert_eq!(single.p_informative, b.p_informative);
            assert_eq!(single.p_not_informative, b.p_not_informative);
        }
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let mut rng = Rng::new(61);
        let source = toy_source(3, 7);
        for kind in [CellKind::BiLstm, CellKind::Gru] {
            let model = RecurrentClassifier::new(kind, "toy", 3, small_config(), &mut rng);
            let seqs: Vec<EncodedSequence> = (0..4)
                .map(|i| {
                    let toks: Vec<String> = (0..3 + i % 2).map(|_| format!("w{}", rng.below(30))).collect();
                    encode(&toks, &source, 5)
                })
                .collect();
            let refs: Vec<&EncodedSequence> = seqs.iter().collect();
            let mut g = Graph::new();
            let leaves = model.bind(&mut g, true).unwrap();
            let probs = model.forward(&mut g, &leaves, &refs, false, &mut rng).unwrap();
            // pull a scalar that depends on both classes
            let onehot = g.leaf(&[4, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0], false).unwrap();
            let picked = g.mul(probs, onehot).unwrap();
            let per_row = g.sum_axis(picked, 1).unwrap();
            let clamped = g.clamp_min(per_row, 1e-12).unwrap();
            let ln = g.ln(clamped).unwrap();
            let mean = g.mean(ln).unwrap();
            let loss = g.scale(mean, -1.0).unwrap();
            g.backward(loss).unwrap();
            for (leaf, (name, _, _)) in
                RecurrentClassifier::leaves_in_order(&leaves).iter().zip(model.named_params())
            {
                let grad = g.grad(*leaf).unwrap();
                assert!(
                    grad.iter().any(|&v| v != 0.0),
                    "{kind:?} {name}: gradient identically zero"
                );
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let mut rng = Rng::new(71);
        let source = toy_source(4, 8);
        for kind in [CellKind::BiLstm, CellKind::Gru] {
            let model = RecurrentClassifier::new(kind, "glove", 4, small_config(), &mut rng);
            let pipe = PipelineConfig::new(Stopwords::default_english(), 9);
            let meta = CheckpointMeta { max_len: pipe.max_len, pipeline_fingerprint: pipe.fingerprint() };
            let mut buf = Vec::new();
            save_checkpoint(&model, &meta, &mut buf).unwrap();
            let (loaded, meta2) = load_checkpoint(std::io::Cursor::new(&buf)).unwrap();
            assert_eq!(meta, meta2);
            assert_eq!(loaded.cell_kind, model.cell_kind);
            assert_eq!(loaded.source_name, model.source_name);
            for ((name_a, vals_a, _), (name_b, vals_b, _)) in
                model.named_params().iter().zip(loaded.named_params().iter())
            {
                assert_eq!(name_a, name_b);
                for (x, y) in vals_a.iter().zip(vals_b.iter()) {
                    assert_eq!(x.to_bits(), y.to_bits(), "param {name_a}");
                }
            }
            let seq = encode(&tokens(&["w3", "w9", "w12"]), &source, 9);
            let p1 = model.classify(&seq, false, &mut rng).unwrap();
            let p2 = loaded.classify(&seq, false, &mut rng).unwrap();
            assert_eq!(p1.p_informative.to_bits(), p2.p_informative.to_bits());
        }
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let mut rng = Rng::new(81);
        let model = RecurrentClassifier::new(CellKind::Gru, "x", 2, small_config(), &mut rng);
        let meta = CheckpointMeta { max_len: 5, pipeline_fingerprint: 1 };
        let mut buf = Vec::new();
        save_checkpoint(&model, &meta, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated = &text[..text.len() / 2];
        assert!(load_checkpoint(std::io::Cursor::new(truncated)).is_err());
        let bad_magic = text.replacen("embercast checkpoint v1", "nope", 1);
        assert!(load_checkpoint(std::io::Cursor::new(bad_magic)).is_err());
    }

    #[test]
    fn training_forward_is_seed_deterministic() {
        let source = toy_source(3, 9);
        let mut init = Rng::new(55);
        let model = RecurrentClassifier::new(CellKind::BiLstm, "toy", 3, small_config(), &mut init);
        let seq = encode(&tokens(&["w0", "w5", "w7"]), &source, 5);
        let run = |seed: u64| {
            let mut rng = Rng::new(seed);
            let p = model.classify(&seq, true, &mut rng).unwrap();
            (p.p_informative.to_bits(), p.p_not_informative.to_bits())
        };
        assert_eq!(run(123), run(123));
        assert_ne!(run(123), run(124)); // dropout actually fires
    }
}
