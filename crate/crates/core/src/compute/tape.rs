use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;

use super::ops::{log_sum_exp, sigmoid};
use super::store::{Gradients, ParamId, ParameterStore};
use super::tensor::gemm;
use super::{ComputeError, Tensor};

static CORRUPT_TANH_GRAD: AtomicBool = AtomicBool::new(false);

/// Negative-control switch: when set, the tanh backward rule is deliberately
/// wrong so gradient checks can be shown to fail.
#[doc(hidden)]
pub fn set_corrupt_tanh_gradient(on: bool) {
    CORRUPT_TANH_GRAD.store(on, Ordering::SeqCst);
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param { id: ParamId, frozen: bool },
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    AddBias { x: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulCol { col: NodeId, m: NodeId },
    OneMinus(NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    ConcatCols(Vec<NodeId>),
    VStack(Vec<NodeId>),
    SliceCols { a: NodeId, start: usize },
    Gather { table: NodeId, ids: Vec<usize> },
    Unfold { a: NodeId, segments: Vec<(usize, usize)>, width: usize },
    SegmentMax { a: NodeId, argmax: Vec<usize> },
    RowDot(NodeId, NodeId),
    Softmax(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<usize>, weights: Vec<f64>, probs: Tensor },
    BceWithLogits { logits: NodeId, labels: Vec<f64>, weights: Vec<f64> },
    Sum(NodeId),
    Blend { a: NodeId, b: NodeId, mask: Vec<f64> },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations executed against a read-only [`ParameterStore`] and
/// replays them in reverse to produce parameter gradients.
///
/// A tape supports a single backward pass; build a fresh tape per step.
pub struct Tape<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<(ParamId, bool), NodeId>,
    backward_done: bool,
}

fn dim_err(op: &str, a: &Tensor, b: &Tensor) -> ComputeError {
    ComputeError::Dimension { op: op.to_string(), left: a.shape().to_vec(), right: b.shape().to_vec() }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Tape { store, nodes: Vec::new(), param_nodes: HashMap::new(), backward_done: false }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param { id, .. }) => self.store.value(*id),
            (None, _) => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// Trainable parameter leaf. Repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<NodeId, ComputeError> {
        let id = self.store.id(name)?;
        Ok(self.param_by_id(id, false))
    }

    /// Parameter leaf that never receives gradient (static embeddings).
    pub fn frozen_param(&mut self, name: &str) -> Result<NodeId, ComputeError> {
        let id = self.store.id(name)?;
        Ok(self.param_by_id(id, true))
    }

    pub fn param_by_id(&mut self, id: ParamId, frozen: bool) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&(id, frozen)) {
            return n;
        }
        self.nodes.push(Node { value: None, op: Op::Param { id, frozen }, requires_grad: !frozen });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert((id, frozen), n);
        n
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId, ComputeError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ar, ac) = av.dims();
        let (br, bc) = bv.dims();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(dim_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(av.data(), (ar, ac), ta, bv.data(), (br, bc), tb, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ComputeError> {
        self.matmul_t(a, b, false, false)
    }

    /// Row-batched `x Wᵀ + b` for `W` stored as `out × in`, i.e. `Wx + b` per row.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, ComputeError> {
        let xw = self.matmul_t(x, w, false, true)?;
        self.add_bias(xw, b)
    }

    /// Row-batched `x Wᵀ`.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId, ComputeError> {
        self.matmul_t(x, w, false, true)
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, ComputeError> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (r, c) = xv.dims();
        if bv.len() != c {
            return Err(dim_err("add_bias", xv, bv));
        }
        let mut out = xv.clone();
        for i in 0..r {
            for (o, bb) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias { x, b }, rg))
    }

    fn zip_op(
        &mut self,
        name: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, ComputeError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(dim_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ComputeError> {
        let v = self.zip_op("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ComputeError> {
        let v = self.zip_op("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ComputeError> {
        let v = self.zip_op("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Scales each row of `m` by the matching entry of the column `col`.
    pub fn mul_col(&mut self, col: NodeId, m: NodeId) -> Result<NodeId, ComputeError> {
        let (cv, mv) = (self.value(col), self.value(m));
        let (r, c) = mv.dims();
        if cv.len() != r {
            return Err(dim_err("mul_col", cv, mv));
        }
        let mut out = mv.clone();
        for i in 0..r {
            let k = cv.data()[i];
            out.row_mut(i).iter_mut().for_each(|v| *v *= k);
        }
        let _ = c;
        let rg = self.rg(col) || self.rg(m);
        Ok(self.push(out, Op::MulCol { col, m }, rg))
    }

    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 - x);
        let rg = self.rg(a);
        self.push(v, Op::OneMinus(a), rg)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, ComputeError> {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(dim_err("concat_cols", self.value(parts[0]), pv));
            }
            let c = pv.cols();
            for r in 0..rows {
                out[r * total + off..r * total + off + c].copy_from_slice(pv.row(r));
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks row blocks with equal column counts.
    pub fn vstack(&mut self, parts: &[NodeId]) -> Result<NodeId, ComputeError> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::VStack(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, ComputeError> {
        let av = self.value(a);
        let (rows, cols) = av.dims();
        if start + len > cols {
            return Err(ComputeError::Shape(format!(
                "slice [{}, {}) out of {} columns",
                start,
                start + len,
                cols
            )));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(rows, len, out)?, Op::SliceCols { a, start }, rg))
    }

    /// Row lookup: output row `k` is row `ids[k]` of `table`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, ComputeError> {
        let tv = self.value(table);
        let rows = tv.rows();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(ComputeError::IndexOutOfRange { index: bad, len: rows });
        }
        let out = tv.select_rows(ids);
        let rg = self.rg(table);
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    /// Sliding windows over row segments. Each `(start, len)` segment of
    /// rows with `len >= width` yields `len - width + 1` output rows, each
    /// the concatenation of `width` consecutive input rows.
    pub fn unfold(&mut self, a: NodeId, segments: &[(usize, usize)], width: usize) -> Result<NodeId, ComputeError> {
        let av = self.value(a);
        let (rows, d) = av.dims();
        let mut out = Vec::new();
        let mut n = 0;
        for &(start, len) in segments {
            if len < width || start + len > rows || width == 0 {
                return Err(ComputeError::Shape(format!(
                    "unfold segment ({}, {}) invalid for width {} over {} rows",
                    start, len, width, rows
                )));
            }
            for p in 0..=(len - width) {
                let s = (start + p) * d;
                out.extend_from_slice(&av.data()[s..s + width * d]);
                n += 1;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::matrix(n, width * d, out)?,
            Op::Unfold { a, segments: segments.to_vec(), width },
            rg,
        ))
    }

    /// Column-wise max over consecutive row groups of the given sizes.
    /// The first maximal row wins ties.
    pub fn segment_max(&mut self, a: NodeId, sizes: &[usize]) -> Result<NodeId, ComputeError> {
        let av = self.value(a);
        let (rows, cols) = av.dims();
        if sizes.iter().sum::<usize>() != rows || sizes.contains(&0) {
            return Err(ComputeError::Shape(format!(
                "segment sizes {:?} do not tile {} rows",
                sizes, rows
            )));
        }
        let mut out = Vec::with_capacity(sizes.len() * cols);
        let mut argmax = Vec::with_capacity(sizes.len() * cols);
        let mut start = 0;
        for &s in sizes {
            for c in 0..cols {
                let mut best = start;
                for r in start + 1..start + s {
                    if av.get(r, c) > av.get(best, c) {
                        best = r;
                    }
                }
                out.push(av.get(best, c));
                argmax.push(best);
            }
            start += s;
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(sizes.len(), cols, out)?, Op::SegmentMax { a, argmax }, rg))
    }

    /// Per-row dot product, `rows × 1`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ComputeError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(dim_err("row_dot", av, bv));
        }
        let rows = av.rows();
        let out = (0..rows).map(|r| av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum()).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(rows, 1, out)?, Op::RowDot(a, b), rg))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, ComputeError> {
        let out = super::ops::softmax_rows(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Row-wise softmax where `mask[r][c] == false` entries get probability 0.
    pub fn masked_softmax(&mut self, a: NodeId, mask: &[Vec<bool>]) -> Result<NodeId, ComputeError> {
        let out = super::ops::masked_softmax_rows(self.value(a), mask)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Weighted sum over rows of `-log softmax(logits)[target]`, as a scalar.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], weights: &[f64]) -> Result<NodeId, ComputeError> {
        let lv = self.value(logits);
        let (rows, cols) = lv.dims();
        if targets.len() != rows || weights.len() != rows {
            return Err(ComputeError::Shape(format!(
                "cross_entropy: {} rows, {} targets, {} weights",
                rows,
                targets.len(),
                weights.len()
            )));
        }
        let mut probs = lv.clone();
        let mut total = 0.0;
        for r in 0..rows {
            if targets[r] >= cols {
                return Err(ComputeError::IndexOutOfRange { index: targets[r], len: cols });
            }
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            total += weights[r] * (lse - row[targets[r]]);
            for (p, &x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs },
            rg,
        ))
    }

    /// Weighted sum of binary cross-entropy over a `rows × 1` logit column.
    pub fn bce_with_logits(&mut self, logits: NodeId, labels: &[f64], weights: &[f64]) -> Result<NodeId, ComputeError> {
        let lv = self.value(logits);
        if lv.len() != labels.len() || labels.len() != weights.len() {
            return Err(ComputeError::Shape(format!(
                "bce: {} logits, {} labels, {} weights",
                lv.len(),
                labels.len(),
                weights.len()
            )));
        }
        let total = lv
            .data()
            .iter()
            .zip(labels.iter().zip(weights))
            .map(|(&z, (&y, &w))| w * (z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()))
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::BceWithLogits { logits, labels: labels.to_vec(), weights: weights.to_vec() },
            rg,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    /// Row-wise `mask ⊙ a + (1 − mask) ⊙ b` with a constant per-row mask.
    pub fn blend(&mut self, a: NodeId, b: NodeId, mask: &[f64]) -> Result<NodeId, ComputeError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) || mask.len() != av.rows() {
            return Err(dim_err("blend", av, bv));
        }
        let mut out = av.clone();
        for (r, &m) in mask.iter().enumerate() {
            for (o, &y) in out.row_mut(r).iter_mut().zip(bv.row(r)) {
                *o = m * *o + (1.0 - m) * y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Blend { a, b, mask: mask.to_vec() }, rg))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, a: NodeId, p: f64, rng: &mut R) -> Result<NodeId, ComputeError> {
        if p <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let mask = self.value(a).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Reverse pass from a scalar `loss`. Gradients of frozen parameters and
    /// of parameters the loss does not reach are absent from the result.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients, ComputeError> {
        if self.backward_done {
            return Err(ComputeError::DoubleBackward);
        }
        if self.value(loss).len() != 1 {
            return Err(ComputeError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut out = Gradients::default();
        let corrupt = CORRUPT_TANH_GRAD.load(Ordering::Relaxed);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = self.value(NodeId(i));
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param { id, frozen } => {
                    if !frozen {
                        out.add(*id, g);
                    }
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, n) = g.dims();
                    if self.rg(*a) {
                        let mut da = vec![0.0; av.len()];
                        if !ta {
                            gemm(g.data(), (m, n), false, bv.data(), bv.dims(), !tb, &mut da, false);
                        } else {
                            gemm(bv.data(), bv.dims(), *tb, g.data(), (m, n), true, &mut da, false);
                        }
                        acc(&mut grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; bv.len()];
                        if !tb {
                            gemm(av.data(), av.dims(), !ta, g.data(), (m, n), false, &mut db, false);
                        } else {
                            gemm(g.data(), (m, n), true, av.data(), av.dims(), *ta, &mut db, false);
                        }
                        acc(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                    }
                }
                Op::AddBias { x, b } => {
                    if self.rg(*b) {
                        let bv = self.value(*b);
                        let mut db = vec![0.0; bv.len()];
                        for r in 0..g.rows() {
                            for (d, v) in db.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        acc(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                    }
                    if self.rg(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        acc(&mut grads, *a, zip(&g, bv, |d, y| d * y));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, zip(&g, av, |d, x| d * x));
                    }
                }
                Op::MulCol { col, m } => {
                    let (cv, mv) = (self.value(*col), self.value(*m));
                    if self.rg(*col) {
                        let dc: Vec<f64> = (0..g.rows())
                            .map(|r| g.row(r).iter().zip(mv.row(r)).map(|(d, x)| d * x).sum())
                            .collect();
                        acc(&mut grads, *col, Tensor::new(cv.shape().to_vec(), dc)?);
                    }
                    if self.rg(*m) {
                        let mut dm = g.clone();
                        for r in 0..dm.rows() {
                            let k = cv.data()[r];
                            dm.row_mut(r).iter_mut().for_each(|v| *v *= k);
                        }
                        acc(&mut grads, *m, dm);
                    }
                }
                Op::OneMinus(a) => acc(&mut grads, *a, g.map(|v| -v)),
                Op::Scale(a, k) => {
                    let k = *k;
                    acc(&mut grads, *a, g.map(|v| v * k))
                }
                Op::Tanh(a) => {
                    let d = if corrupt { zip(&g, y, |d, t| d * (1.0 - t)) } else { zip(&g, y, |d, t| d * (1.0 - t * t)) };
                    acc(&mut grads, *a, d)
                }
                Op::Sigmoid(a) => acc(&mut grads, *a, zip(&g, y, |d, s| d * s * (1.0 - s))),
                Op::Relu(a) => {
                    let xv = self.value(*a);
                    acc(&mut grads, *a, zip(&g, xv, |d, x| if x > 0.0 { d } else { 0.0 }))
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let c = pv.cols();
                        if self.rg(p) {
                            let mut d = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                d.extend_from_slice(&g.data()[r * total + off..r * total + off + c]);
                            }
                            acc(&mut grads, p, Tensor::new(pv.shape().to_vec(), d)?);
                        }
                        off += c;
                    }
                }
                Op::VStack(parts) => {
                    let cols = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let n = pv.len();
                        if self.rg(p) {
                            let d = g.data()[off..off + n].to_vec();
                            acc(&mut grads, p, Tensor::new(pv.shape().to_vec(), d)?);
                        }
                        off += pv.rows() * cols;
                    }
                }
                Op::SliceCols { a, start } => {
                    let av = self.value(*a);
                    let mut d = Tensor::zeros(av.shape());
                    let len = g.cols();
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let mut d = Tensor::zeros(tv.shape());
                    for (k, &id) in ids.iter().enumerate() {
                        for (o, v) in d.row_mut(id).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *table, d);
                }
                Op::Unfold { a, segments, width } => {
                    let av = self.value(*a);
                    let d_in = av.cols();
                    let mut d = Tensor::zeros(av.shape());
                    let mut n = 0;
                    for &(start, len) in segments {
                        for p in 0..=(len - width) {
                            let s = (start + p) * d_in;
                            for (o, v) in d.data_mut()[s..s + width * d_in].iter_mut().zip(g.row(n)) {
                                *o += v;
                            }
                            n += 1;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SegmentMax { a, argmax } => {
                    let av = self.value(*a);
                    let cols = av.cols();
                    let mut d = Tensor::zeros(av.shape());
                    for (k, &r) in argmax.iter().enumerate() {
                        let c = k % cols;
                        d.data_mut()[r * cols + c] += g.data()[k];
                    }
                    acc(&mut grads, *a, d);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let scale_rows = |src: &Tensor| {
                        let mut t = src.clone();
                        for r in 0..t.rows() {
                            let k = g.data()[r];
                            t.row_mut(r).iter_mut().for_each(|v| *v *= k);
                        }
                        t
                    };
                    if self.rg(*a) {
                        acc(&mut grads, *a, scale_rows(bv));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, scale_rows(av));
                    }
                }
                Op::Softmax(a) => {
                    let mut d = y.clone();
                    for r in 0..d.rows() {
                        let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(p, gg)| p * gg).sum();
                        for (o, gg) in d.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o *= gg - dot;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::CrossEntropy { logits, targets, weights, probs } => {
                    let s = g.data()[0];
                    let mut d = probs.clone();
                    for r in 0..d.rows() {
                        let w = weights[r] * s;
                        let row = d.row_mut(r);
                        row[targets[r]] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= w);
                    }
                    acc(&mut grads, *logits, d);
                }
                Op::BceWithLogits { logits, labels, weights } => {
                    let s = g.data()[0];
                    let lv = self.value(*logits);
                    let d: Vec<f64> = lv
                        .data()
                        .iter()
                        .zip(labels.iter().zip(weights))
                        .map(|(&z, (&y, &w))| s * w * (sigmoid(z) - y))
                        .collect();
                    acc(&mut grads, *logits, Tensor::new(lv.shape().to_vec(), d)?);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    acc(&mut grads, *a, Tensor::filled(self.value(*a).shape(), s));
                }
                Op::Blend { a, b, mask } => {
                    if self.rg(*a) {
                        let mut d = g.clone();
                        for (r, &m) in mask.iter().enumerate() {
                            d.row_mut(r).iter_mut().for_each(|v| *v *= m);
                        }
                        acc(&mut grads, *a, d);
                    }
                    if self.rg(*b) {
                        let mut d = g;
                        for (r, &m) in mask.iter().enumerate() {
                            d.row_mut(r).iter_mut().for_each(|v| *v *= 1.0 - m);
                        }
                        acc(&mut grads, *b, d);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip of equal shapes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(entries: &[(&str, Tensor)]) -> ParameterStore {
        let mut s = ParameterStore::new();
        for (n, t) in entries {
            s.insert(n, t.clone()).unwrap();
        }
        s
    }

    #[test]
    fn affine_hand_case() {
        let store = store_with(&[
            ("w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
            ("b", Tensor::vector(vec![0.0, 0.0])),
        ]);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let (w, b) = (tape.param("w").unwrap(), tape.param("b").unwrap());
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn affine_identity_and_zero_weights() {
        let store = store_with(&[
            ("eye", Tensor::identity(3)),
            ("zero", Tensor::zeros(&[3, 3])),
            ("b0", Tensor::zeros(&[3])),
            ("c", Tensor::vector(vec![4.0, -1.0, 0.5])),
        ]);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::vector(vec![0.3, -2.0, 7.0]));
        let (eye, zero, b0, c) =
            (tape.param("eye").unwrap(), tape.param("zero").unwrap(), tape.param("b0").unwrap(), tape.param("c").unwrap());
        let y1 = tape.affine(x, eye, b0).unwrap();
        let y2 = tape.affine(x, zero, c).unwrap();
        assert_eq!(tape.value(y1).data(), &[0.3, -2.0, 7.0]);
        assert_eq!(tape.value(y2).data(), &[4.0, -1.0, 0.5]);
    }

    #[test]
    fn affine_shape_mismatch_names_both_shapes() {
        let store = store_with(&[("w", Tensor::zeros(&[2, 3])), ("b", Tensor::zeros(&[2]))]);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let (w, b) = (tape.param("w").unwrap(), tape.param("b").unwrap());
        match tape.affine(x, w, b) {
            Err(ComputeError::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {:?}", other),
        }
    }

    #[test]
    fn grad_of_sum_wx_is_rows_of_x() {
        // loss = sum(W x) => dL/dW[i][j] = x[j]
        let store = store_with(&[("w", Tensor::matrix(2, 3, vec![0.5; 6]).unwrap())]);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let w = tape.param("w").unwrap();
        let y = tape.linear(x, w).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(store.id("w").unwrap()).unwrap();
        assert_eq!(g.data(), &[1.0, -2.0, 3.0, 1.0, -2.0, 3.0]);
    }

    #[test]
    fn unreachable_parameter_has_no_gradient() {
        let store = store_with(&[("p", Tensor::vector(vec![1.0])), ("q", Tensor::vector(vec![2.0]))]);
        let mut tape = Tape::new(&store);
        let p = tape.param("p").unwrap();
        let _q = tape.param("q").unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(store.id("q").unwrap()).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let store = store_with(&[("p", Tensor::vector(vec![1.0, 2.0]))]);
        let mut tape = Tape::new(&store);
        let p = tape.param("p").unwrap();
        assert!(matches!(tape.backward(p), Err(ComputeError::NonScalarLoss(_))));
    }

    #[test]
    fn second_backward_is_an_error() {
        let store = store_with(&[("p", Tensor::vector(vec![1.0]))]);
        let mut tape = Tape::new(&store);
        let p = tape.param("p").unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(ComputeError::DoubleBackward)));
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let store = store_with(&[("e", Tensor::matrix(3, 2, vec![1.0; 6]).unwrap())]);
        let mut tape = Tape::new(&store);
        let e = tape.frozen_param("e").unwrap();
        let rows = tape.gather(e, &[0, 2]).unwrap();
        let loss = tape.sum(rows);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(store.id("e").unwrap()).is_none());
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let store = store_with(&[("e", Tensor::matrix(3, 2, vec![0.0; 6]).unwrap())]);
        let mut tape = Tape::new(&store);
        let e = tape.param("e").unwrap();
        let rows = tape.gather(e, &[1, 1, 2]).unwrap();
        let loss = tape.sum(rows);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(store.id("e").unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn gather_out_of_range() {
        let store = store_with(&[("e", Tensor::zeros(&[2, 2]))]);
        let mut tape = Tape::new(&store);
        let e = tape.param("e").unwrap();
        assert!(matches!(tape.gather(e, &[2]), Err(ComputeError::IndexOutOfRange { index: 2, len: 2 })));
    }

    #[test]
    fn segment_max_picks_first_max() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(Tensor::matrix(3, 1, vec![2.0, 5.0, 5.0]).unwrap());
        let m = tape.segment_max(a, &[3]).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0]);
        assert!(tape.segment_max(a, &[2]).is_err());
    }

    #[test]
    fn vstack_routes_gradient_to_blocks() {
        let store = store_with(&[("a", Tensor::vector(vec![1.0, 2.0])), ("b", Tensor::zeros(&[2, 2]))]);
        let mut tape = Tape::new(&store);
        let a = tape.param("a").unwrap();
        let b = tape.param("b").unwrap();
        let s = tape.vstack(&[a, b]).unwrap();
        assert_eq!(tape.value(s).dims(), (3, 2));
        let k = tape.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = tape.mul(s, k).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(store.id("a").unwrap()).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(g.get(store.id("b").unwrap()).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
    }
}
