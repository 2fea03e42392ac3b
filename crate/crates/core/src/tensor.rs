//! Dense f64 tensor arithmetic with reverse-mode differentiation.
//!
//! Operations are recorded on a tape owned by [`Graph`]; [`Tensor`] is a
//! cheap copyable handle into it. A graph is built per forward pass,
//! `backward` walks the tape in reverse and accumulates (+=) gradients
//! into every recording node that requires them, and parameter updates
//! read the gradients back out. All storage is 64-bit; every forward op
//! verifies its output is finite.
//!
//! Tensors are logically rank 0, 1 or 2; rank-0 and rank-1 values are
//! treated as single rows where a 2-d view is needed.

use crate::rng::Rng;

/// Handle to a node in a [`Graph`]. Only valid for the graph that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Sigmoid(Tensor),
    Tanh(Tensor),
    Relu(Tensor),
    Softmax(Tensor),
    Ln(Tensor),
    ClampMin(Tensor, f64),
    Concat { axis: usize, parts: Vec<Tensor> },
    Slice { src: Tensor, axis: usize, start: usize },
    Sum(Tensor),
    Mean(Tensor),
    SumAxis { src: Tensor, axis: usize },
    Dropout { src: Tensor, mask: Vec<f64> },
    Reshape(Tensor),
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
}

/// Recorded computation tape. Nodes are stored in construction order,
/// which is already a topological order of the graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// View any rank-0/1/2 shape as (rows, cols).
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => unreachable!("tensors are at most rank 2"),
    }
}

/// How the two sides of an element-wise op line up.
#[derive(Clone, Copy, PartialEq)]
enum Align {
    Same,
    /// lhs is a single row broadcast over rhs rows, or vice versa.
    RowVector { vector_is_lhs: bool },
    /// lhs is a single column broadcast over rhs columns, or vice versa.
    ColVector { vector_is_lhs: bool },
}

fn alignment(op: &'static str, a: &[usize], b: &[usize]) -> Result<Align> {
    let (ar, ac) = rows_cols(a);
    let (br, bc) = rows_cols(b);
    if (ar, ac) == (br, bc) {
        return Ok(Align::Same);
    }
    if ar == 1 && ac == bc {
        return Ok(Align::RowVector { vector_is_lhs: true });
    }
    if br == 1 && bc == ac {
        return Ok(Align::RowVector { vector_is_lhs: false });
    }
    if ac == 1 && ar == br {
        return Ok(Align::ColVector { vector_is_lhs: true });
    }
    if bc == 1 && br == ar {
        return Ok(Align::ColVector { vector_is_lhs: false });
    }
    Err(TensorError::ShapeMismatch {
        op,
        detail: format!("{a:?} vs {b:?}"),
    })
}

// out += a · b, all row-major. Deterministic ascending accumulation order.
fn gemm_nn_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

// out (m×k) += a (m×n) · bᵀ where b is (k×n).
fn gemm_nt_acc(a: &[f64], m: usize, n: usize, b: &[f64], k: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

// out (m×n) += aᵀ · b where a is (k×m), b is (k×n).
fn gemm_tn_acc(a: &[f64], k: usize, m: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for l in 0..k {
        let a_row = &a[l * m..(l + 1) * m];
        let b_row = &b[l * n..(l + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn values(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].values
    }

    /// Accumulated gradient, if this node requires one.
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.grads[t.0].as_deref()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.grads[t.0].is_some()
    }

    /// Reset all gradient accumulators to zero.
    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.fill(0.0);
        }
    }

    fn push(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        kind: Op,
        requires_grad: bool,
    ) -> Result<Tensor> {
        debug_assert_eq!(numel(&shape), values.len());
        if !values.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let grad = requires_grad.then(|| vec![0.0; values.len()]);
        self.nodes.push(Node { shape, values, op: kind });
        self.grads.push(grad);
        Ok(Tensor(self.nodes.len() - 1))
    }

    fn rg(&self, t: Tensor) -> bool {
        self.grads[t.0].is_some()
    }

    /// Record a leaf tensor. Gradients accumulate into it when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, shape: &[usize], values: &[f64], requires_grad: bool) -> Result<Tensor> {
        if numel(shape) != values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "leaf",
                detail: format!("shape {shape:?} holds {} values, got {}", numel(shape), values.len()),
            });
        }
        self.push("leaf", shape.to_vec(), values.to_vec(), Op::Leaf, requires_grad)
    }

    pub fn scalar(&mut self, v: f64) -> Result<Tensor> {
        self.push("leaf", vec![], vec![v], Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k) = rows_cols(self.shape(a));
        let (k2, n) = rows_cols(self.shape(b));
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} · {:?}", self.shape(a), self.shape(b)),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn_acc(self.values(a), m, k, self.values(b), n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), rg)
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: Tensor,
        b: Tensor,
        f: impl Fn(f64, f64) -> f64,
        kind: Op,
    ) -> Result<Tensor> {
        let align = alignment(op, self.shape(a), self.shape(b))?;
        let (av, bv) = (self.values(a), self.values(b));
        let (out_shape, values) = match align {
            Align::Same => (
                self.shape(a).to_vec(),
                av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Align::RowVector { vector_is_lhs } => {
                let (big, big_t, vec_v) = if vector_is_lhs { (bv, b, av) } else { (av, a, bv) };
                let (rows, cols) = rows_cols(self.shape(big_t));
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let (x, y) = if vector_is_lhs {
                            (vec_v[c], big[r * cols + c])
                        } else {
                            (big[r * cols + c], vec_v[c])
                        };
                        out.push(f(x, y));
                    }
                }
                (self.shape(big_t).to_vec(), out)
            }
            Align::ColVector { vector_is_lhs } => {
                let (big, big_t, vec_v) = if vector_is_lhs { (bv, b, av) } else { (av, a, bv) };
                let (rows, cols) = rows_cols(self.shape(big_t));
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let (x, y) = if vector_is_lhs {
                            (vec_v[r], big[r * cols + c])
                        } else {
                            (big[r * cols + c], vec_v[r])
                        };
                        out.push(f(x, y));
                    }
                }
                (self.shape(big_t).to_vec(), out)
            }
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(op, out_shape, values, kind, rg)
    }

    /// Element-wise sum. One side may be a single row or column, which is
    /// broadcast across the other.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise product, with the same broadcasting as [`Graph::add`].
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let values = self.values(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push("scale", self.shape(a).to_vec(), values, Op::Scale(a, c), rg)
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: Tensor,
        f: impl Fn(f64) -> f64,
        kind: Op,
    ) -> Result<Tensor> {
        let values = self.values(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(op, self.shape(a).to_vec(), values, kind, rg)
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Result<Tensor> {
        self.unary("sigmoid", a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Tensor) -> Result<Tensor> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn ln(&mut self, a: Tensor) -> Result<Tensor> {
        self.unary("ln", a, f64::ln, Op::Ln(a))
    }

    pub fn clamp_min(&mut self, a: Tensor, floor: f64) -> Result<Tensor> {
        self.unary("clamp_min", a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax(&mut self, a: Tensor) -> Result<Tensor> {
        let (rows, cols) = rows_cols(self.shape(a));
        if cols == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                detail: "empty rows".into(),
            });
        }
        let av = self.values(a);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &av[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let exp: Vec<f64> = row
                .iter()
                .map(|&x| {
                    let e = (x - max).exp();
                    sum += e;
                    e
                })
                .collect();
            out.extend(exp.into_iter().map(|e| e / sum));
        }
        let rg = self.rg(a);
        self.push("softmax", self.shape(a).to_vec(), out, Op::Softmax(a), rg)
    }

    /// Concatenate along `axis` (0 = stack rows, 1 = widen rows).
    pub fn concat(&mut self, axis: usize, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() || axis > 1 {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                detail: format!("{} parts, axis {axis}", parts.len()),
            });
        }
        let (r0, c0) = rows_cols(self.shape(parts[0]));
        let (mut rows, mut cols) = (r0, c0);
        for &p in &parts[1..] {
            let (r, c) = rows_cols(self.shape(p));
            if axis == 0 {
                if c != c0 {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        detail: format!("column counts {c0} vs {c}"),
                    });
                }
                rows += r;
            } else {
                if r != r0 {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        detail: format!("row counts {r0} vs {r}"),
                    });
                }
                cols += c;
            }
        }
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &p in parts {
                out.extend_from_slice(self.values(p));
            }
        } else {
            for r in 0..rows {
                for &p in parts {
                    let (_, c) = rows_cols(self.shape(p));
                    out.extend_from_slice(&self.values(p)[r * c..(r + 1) * c]);
                }
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat",
            vec![rows, cols],
            out,
            Op::Concat { axis, parts: parts.to_vec() },
            rg,
        )
    }

    /// Contiguous slice of `len` rows (axis 0) or columns (axis 1).
    pub fn slice(&mut self, src: Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = rows_cols(self.shape(src));
        let bound = if axis == 0 { rows } else { cols };
        if axis > 1 || start + len > bound || len == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                detail: format!("axis {axis}, {start}..{} of {bound}", start + len),
            });
        }
        let v = self.values(src);
        let (shape, out) = if axis == 0 {
            (vec![len, cols], v[start * cols..(start + len) * cols].to_vec())
        } else {
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
            }
            (vec![rows, len], out)
        };
        let rg = self.rg(src);
        self.push("slice", shape, out, Op::Slice { src, axis, start }, rg)
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.values(a).len() || shape.len() > 2 {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape(a)),
            });
        }
        let values = self.values(a).to_vec();
        let rg = self.rg(a);
        self.push("reshape", shape.to_vec(), values, Op::Reshape(a), rg)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let s = self.values(a).iter().sum();
        let rg = self.rg(a);
        self.push("sum", vec![], vec![s], Op::Sum(a), rg)
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        let v = self.values(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push("mean", vec![], vec![m], Op::Mean(a), rg)
    }

    /// Reduce one axis by summation; axis 0 yields a row, axis 1 a column.
    pub fn sum_axis(&mut self, a: Tensor, axis: usize) -> Result<Tensor> {
        let (rows, cols) = rows_cols(self.shape(a));
        if axis > 1 {
            return Err(TensorError::ShapeMismatch {
                op: "sum_axis",
                detail: format!("axis {axis}"),
            });
        }
        let v = self.values(a);
        let (shape, out) = if axis == 0 {
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c] += v[r * cols + c];
                }
            }
            (vec![1, cols], out)
        } else {
            let mut out = vec![0.0; rows];
            for r in 0..rows {
                out[r] = v[r * cols..(r + 1) * cols].iter().sum();
            }
            (vec![rows, 1], out)
        };
        let rg = self.rg(a);
        self.push("sum_axis", shape, out, Op::SumAxis { src: a, axis }, rg)
    }

    /// Inverted dropout: in training each element is zeroed with
    /// probability `rate` and survivors are scaled by 1/(1-rate), so the
    /// eval-mode forward is exactly the identity.
    pub fn dropout(&mut self, a: Tensor, rate: f64, training: bool, rng: &mut Rng) -> Result<Tensor> {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.values(a).len())
            .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
            .collect();
        let values = self
            .values(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let rg = self.rg(a);
        self.push("dropout", self.shape(a).to_vec(), values, Op::Dropout { src: a, mask }, rg)
    }

    /// Propagate d(loss)/d(node) to every gradient-requiring node
    /// reachable from `loss`. Contributions accumulate; call
    /// [`Graph::zero_grads`] before reusing a graph.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        if self.grads[loss.0].is_none() {
            return Ok(()); // nothing upstream requires a gradient
        }
        self.grads[loss.0].as_mut().unwrap()[0] += 1.0;
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.accumulate_parents(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate_parents(&mut self, i: usize, g: &[f64]) {
        // Tape order guarantees every parent index is < i.
        let Graph { nodes, grads } = self;
        let node = &nodes[i];
        let mut acc = |t: Tensor, f: &mut dyn FnMut(&mut [f64])| {
            if let Some(pg) = grads[t.0].as_mut() {
                f(pg);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(&nodes[a.0].shape);
                let n = rows_cols(&nodes[b.0].shape).1;
                let (av, bv) = (&nodes[a.0].values, &nodes[b.0].values);
                acc(*a, &mut |pg| gemm_nt_acc(g, m, n, bv, k, pg));
                acc(*b, &mut |pg| gemm_tn_acc(av, m, k, g, n, pg));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let sa = &nodes[a.0].shape;
                let sb = &nodes[b.0].shape;
                let align = alignment("add", sa, sb).expect("checked at forward");
                let out_rc = rows_cols(&node.shape);
                acc(*a, &mut |pg| reduce_into(g, out_rc, rows_cols(sa), 1.0, pg));
                acc(*b, &mut |pg| reduce_into(g, out_rc, rows_cols(sb), sign, pg));
                let _ = align;
            }
            Op::Mul(a, b) => {
                let sa = rows_cols(&nodes[a.0].shape);
                let sb = rows_cols(&nodes[b.0].shape);
                let out_rc = rows_cols(&node.shape);
                let (av, bv) = (&nodes[a.0].values, &nodes[b.0].values);
                acc(*a, &mut |pg| {
                    reduce_product_into(g, out_rc, bv, sb, sa, pg);
                });
                acc(*b, &mut |pg| {
                    reduce_product_into(g, out_rc, av, sa, sb, pg);
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(*a, &mut |pg| {
                    for (p, &gv) in pg.iter_mut().zip(g) {
                        *p += gv * c;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.values;
                acc(*a, &mut |pg| {
                    for ((p, &gv), &yv) in pg.iter_mut().zip(g).zip(y) {
                        *p += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.values;
                acc(*a, &mut |pg| {
                    for ((p, &gv), &yv) in pg.iter_mut().zip(g).zip(y) {
                        *p += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Relu(a) => {
                let x = &nodes[a.0].values;
                acc(*a, &mut |pg| {
                    for ((p, &gv), &xv) in pg.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *p += gv;
                        }
                    }
                });
            }
            Op::Ln(a) => {
                let x = &nodes[a.0].values;
                acc(*a, &mut |pg| {
                    for ((p, &gv), &xv) in pg.iter_mut().zip(g).zip(x) {
                        *p += gv / xv;
                    }
                });
            }
            Op::ClampMin(a, floor) => {
                let x = &nodes[a.0].values;
                let floor = *floor;
                acc(*a, &mut |pg| {
                    for ((p, &gv), &xv) in pg.iter_mut().zip(g).zip(x) {
                        if xv > floor {
                            *p += gv;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.values;
                acc(*a, &mut |pg| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        let pr = &mut pg[r * cols..(r + 1) * cols];
                        for ((p, &yv), &gv) in pr.iter_mut().zip(yr).zip(gr) {
                            *p += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Concat { axis, parts } => {
                let (_, out_cols) = rows_cols(&node.shape);
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let n = nodes[p.0].values.len();
                        acc(p, &mut |pg| {
                            for (pv, &gv) in pg.iter_mut().zip(&g[offset..offset + n]) {
                                *pv += gv;
                            }
                        });
                        offset += n;
                    }
                } else {
                    let mut col_off = 0;
                    for &p in parts {
                        let (pr, pc) = rows_cols(&nodes[p.0].shape);
                        acc(p, &mut |pg| {
                            for r in 0..pr {
                                let gr = &g[r * out_cols + col_off..r * out_cols + col_off + pc];
                                for (pv, &gv) in pg[r * pc..(r + 1) * pc].iter_mut().zip(gr) {
                                    *pv += gv;
                                }
                            }
                        });
                        col_off += pc;
                    }
                }
            }
            Op::Slice { src, axis, start } => {
                let (rows, cols) = rows_cols(&nodes[src.0].shape);
                let (or, oc) = rows_cols(&node.shape);
                let (axis, start) = (*axis, *start);
                acc(*src, &mut |pg| {
                    if axis == 0 {
                        for (pv, &gv) in pg[start * cols..start * cols + or * oc].iter_mut().zip(g) {
                            *pv += gv;
                        }
                    } else {
                        for r in 0..rows {
                            let gr = &g[r * oc..(r + 1) * oc];
                            for (pv, &gv) in
                                pg[r * cols + start..r * cols + start + oc].iter_mut().zip(gr)
                            {
                                *pv += gv;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |pg| {
                    for p in pg.iter_mut() {
                        *p += g[0];
                    }
                });
            }
            Op::Mean(a) => {
                let n = nodes[a.0].values.len() as f64;
                acc(*a, &mut |pg| {
                    for p in pg.iter_mut() {
                        *p += g[0] / n;
                    }
                });
            }
            Op::SumAxis { src, axis } => {
                let (rows, cols) = rows_cols(&nodes[src.0].shape);
                let axis = *axis;
                acc(*src, &mut |pg| {
                    for r in 0..rows {
                        for c in 0..cols {
                            pg[r * cols + c] += if axis == 0 { g[c] } else { g[r] };
                        }
                    }
                });
            }
            Op::Dropout { src, mask } => {
                acc(*src, &mut |pg| {
                    for ((p, &gv), &m) in pg.iter_mut().zip(g).zip(mask) {
                        *p += gv * m;
                    }
                });
            }
            Op::Reshape(a) => {
                acc(*a, &mut |pg| {
                    for (p, &gv) in pg.iter_mut().zip(g) {
                        *p += gv;
                    }
                });
            }
        }
    }
}

/// Accumulate `sign * g` (shaped `out_rc`) into a parent gradient whose
/// shape may be the output's, a broadcast row or column of it, or a
/// single broadcast scalar.
fn reduce_into(g: &[f64], out_rc: (usize, usize), parent_rc: (usize, usize), sign: f64, pg: &mut [f64]) {
    let (rows, cols) = out_rc;
    if parent_rc == out_rc {
        for (p, &gv) in pg.iter_mut().zip(g) {
            *p += sign * gv;
        }
    } else if parent_rc == (1, 1) {
        pg[0] += sign * g.iter().sum::<f64>();
    } else if parent_rc.0 == 1 {
        for r in 0..rows {
            for c in 0..cols {
                pg[c] += sign * g[r * cols + c];
            }
        }
    } else {
        for r in 0..rows {
            for c in 0..cols {
                pg[r] += sign * g[r * cols + c];
            }
        }
    }
}

/// Gradient of an element-wise product: accumulate `g * other` into a
/// parent whose shape may be a broadcast row or column. `other` carries
/// its own (possibly broadcast) shape.
fn reduce_product_into(
    g: &[f64],
    out_rc: (usize, usize),
    other: &[f64],
    other_rc: (usize, usize),
    parent_rc: (usize, usize),
    pg: &mut [f64],
) {
    let (rows, cols) = out_rc;
    let other_at = |r: usize, c: usize| -> f64 {
        match other_rc {
            rc if rc == out_rc => other[r * cols + c],
            (1, 1) => other[0],
            (1, _) => other[c],
            _ => other[r],
        }
    };
    if parent_rc == out_rc {
        for r in 0..rows {
            for c in 0..cols {
                pg[r * cols + c] += g[r * cols + c] * other_at(r, c);
            }
        }
    } else if parent_rc == (1, 1) {
        for r in 0..rows {
            for c in 0..cols {
                pg[0] += g[r * cols + c] * other_at(r, c);
            }
        }
    } else if parent_rc.0 == 1 {
        for r in 0..rows {
            for c in 0..cols {
                pg[c] += g[r * cols + c] * other_at(r, c);
            }
        }
    } else {
        for r in 0..rows {
            for c in 0..cols {
                pg[r] += g[r * cols + c] * other_at(r, c);
            }
        }
    }
}

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central finite difference with step `eps`. `f` must be deterministic
/// and scalar-valued.
pub fn grad_check<F>(f: F, shape: &[usize], x: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Tensor) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let xt = g.leaf(shape, x, true)?;
    let y = f(&mut g, xt)?;
    g.backward(y)?;
    let analytic = g.grad(xt).expect("leaf requires grad").to_vec();

    let eval = |x: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let xt = g.leaf(shape, x, false)?;
        let y = f(&mut g, xt)?;
        Ok(g.values(y)[0])
    };

    let mut x_mut = x.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let orig = x_mut[i];
        x_mut[i] = orig + eps;
        let plus = eval(&x_mut)?;
        x_mut[i] = orig - eps;
        let minus = eval(&x_mut)?;
        x_mut[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
