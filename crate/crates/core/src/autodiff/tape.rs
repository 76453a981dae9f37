use super::kernels::{axpy, gemm, gemm_nt, gemm_tn, log_sum_exp, softmax_in_place};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const MIN_NORM: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    DivScalar(Var, Var),
    Relu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    MeanCols(Var),
    Sum(Var),
    Mean(Var),
    Conv1d {
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        patches: Vec<f64>,
    },
    L2NormalizeRows(Var, Vec<f64>),
    CrossEntropyRows(Var, Vec<usize>, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive operations for define-by-run reverse mode.
///
/// Every node's parents are recorded before it, so a single reverse sweep over
/// the node list is a valid topological order. Calling [`Tape::backward`] more
/// than once accumulates into the stored gradients; use [`Tape::zero_grad`] to
/// reset them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        [n] => Ok((1, *n)),
        other => Err(Error::Shape {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Output length of a 1-D convolution, or `None` when it would be < 1.
pub fn conv1d_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Lazily allocated adjoint buffer for a parent, or `None` if it is constant.
fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", ta)?;
        let (k2, n) = dims2("matmul", tb)?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), tb.data(), &mut out, false);
        self.push("matmul", Tensor::raw(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul_nt", ta)?;
        let (n, k2) = dims2("matmul_nt", tb)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, ta.data(), tb.data(), &mut out, false);
        self.push("matmul_nt", Tensor::raw(vec![m, n], out), Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims2("transpose", t)?;
        let d = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        self.push("transpose", Tensor::raw(vec![n, m], out), Op::Transpose(x), &[x])
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.push(name, Tensor::raw(shape, out), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = dims2("add_row", tx)?;
        if tb.len() != n {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let shape = tx.shape().to_vec();
        self.push("add_row", Tensor::raw(shape, out), Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        self.push("scale", Tensor::raw(shape, out), Op::Scale(x, c), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v + c).collect();
        let shape = t.shape().to_vec();
        self.push("add_const", Tensor::raw(shape, out), Op::AddConst(x), &[x])
    }

    /// Divides every entry of `x` by the one-element tensor `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let sv = ts.item()?;
        let out = tx.data().iter().map(|v| v / sv).collect();
        let shape = tx.shape().to_vec();
        self.push("div_scalar", Tensor::raw(shape, out), Op::DivScalar(x, s), &[x, s])
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(name, Tensor::raw(shape, out), op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, f64::exp, Op::Exp(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map("clamp", x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let (_, n) = dims2("softmax_rows", t)?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        self.push("softmax_rows", Tensor::raw(shape, out), Op::SoftmaxRows(x), &[x])
    }

    /// Per-row layer normalization with learned scale and offset.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = dims2("layer_norm", tx)?;
        if tg.len() != n || tb.len() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut normalized = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                normalized[i * n + j] = xh;
                out[i * n + j] = xh * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::raw(shape, out),
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Concatenates matrices with equal row counts along the last dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (m, _) = dims2("concat", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (pm, pn) = dims2("concat", t)?;
            if pm != m {
                return Err(shape_err("concat", self.value(*first), t));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.value(p).data();
            for i in 0..m {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&d[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        self.push("concat", Tensor::raw(vec![m, total], out), Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (_, n) = dims2("concat_rows", self.value(*first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (pm, pn) = dims2("concat_rows", t)?;
            if pn != n {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += pm;
            out.extend_from_slice(t.data());
        }
        self.push("concat_rows", Tensor::raw(vec![rows, n], out), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims2("slice_cols", t)?;
        if start >= end || end > n {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&t.data()[i * n + start..i * n + end]);
        }
        self.push("slice_cols", Tensor::raw(vec![m, w], out), Op::SliceCols(x, start), &[x])
    }

    /// Selects rows by index (embedding lookup); indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims2("gather_rows", t)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(t.row(i));
        }
        self.push(
            "gather_rows",
            Tensor::raw(vec![indices.len(), n], out),
            Op::GatherRows(x, indices.to_vec()),
            &[x],
        )
    }

    /// Mean over axis 0 (rows → `1×n`) or axis 1 (columns → `m×1`).
    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims2("mean_over_axis", t)?;
        match axis {
            0 => {
                let mut out = vec![0.0; n];
                for row in t.data().chunks(n) {
                    axpy(1.0 / m as f64, row, &mut out);
                }
                self.push("mean_over_axis", Tensor::raw(vec![1, n], out), Op::MeanRows(x), &[x])
            }
            1 => {
                let out = t.data().chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
                self.push("mean_over_axis", Tensor::raw(vec![m, 1], out), Op::MeanCols(x), &[x])
            }
            _ => Err(Error::Shape {
                op: "mean_over_axis",
                lhs: t.shape().to_vec(),
                rhs: vec![axis],
            }),
        }
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// 1-D convolution over the time axis with explicit zero padding.
    ///
    /// `x` is `T×d_in`, `kernel` is `k×d_in×d_out`; the result is `T'×d_out` with
    /// `T' = floor((T + 2·pad − k)/stride) + 1`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let (len, d_in) = dims2("conv1d", tx)?;
        let [k, kd_in, d_out] = *tk.shape() else {
            return Err(shape_err("conv1d", tx, tk));
        };
        if kd_in != d_in {
            return Err(shape_err("conv1d", tx, tk));
        }
        let out_len = conv1d_out_len(len, k, stride, pad).ok_or(Error::DegenerateLength {
            len,
            kernel: k,
            stride,
            pad,
        })?;
        let width = k * d_in;
        let mut patches = vec![0.0; out_len * width];
        for t in 0..out_len {
            for j in 0..k {
                let src = (t * stride + j) as isize - pad as isize;
                if src < 0 || src as usize >= len {
                    continue;
                }
                let src = src as usize;
                patches[t * width + j * d_in..t * width + (j + 1) * d_in]
                    .copy_from_slice(&tx.data()[src * d_in..(src + 1) * d_in]);
            }
        }
        let mut out = vec![0.0; out_len * d_out];
        gemm(out_len, width, d_out, &patches, tk.data(), &mut out, false);
        self.push(
            "conv1d",
            Tensor::raw(vec![out_len, d_out], out),
            Op::Conv1d {
                x,
                kernel,
                stride,
                pad,
                patches,
            },
            &[x, kernel],
        )
    }

    /// Scales each row to unit L2 norm. A row with norm below `1e-12` is an
    /// error, never a silent division by zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, n) = dims2("l2_normalize", t)?;
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > MIN_NORM) {
                return Err(Error::ZeroNorm("l2_normalize_rows"));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let shape = t.shape().to_vec();
        self.push("l2_normalize", Tensor::raw(shape, out), Op::L2NormalizeRows(x, norms), &[x])
    }

    /// Mean over rows of `−log softmax(row)[target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (m, n) = dims2("cross_entropy", t)?;
        if targets.len() != m || targets.iter().any(|&c| c >= n) {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (i, row) in t.data().chunks(n).enumerate() {
            loss += log_sum_exp(row) - row[targets[i]];
            softmax_in_place(&mut probs[i * n..(i + 1) * n]);
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropyRows(logits, targets.to_vec(), probs),
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`, accumulating into stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            match &mut self.grads[i] {
                Some(acc) => axpy(1.0, &g, acc),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if let Some(da) = slot(nodes, adj, *a) {
                    gemm_nt(m, n, k, g, val(*b).data(), da, true);
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    gemm_tn(k, m, n, val(*a).data(), g, db, true);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).rows();
                if let Some(da) = slot(nodes, adj, *a) {
                    gemm(m, n, k, g, val(*b).data(), da, true);
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    gemm_tn(n, m, k, g, val(*a).data(), db, true);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (val(*x).rows(), val(*x).cols());
                if let Some(dx) = slot(nodes, adj, *x) {
                    for r in 0..m {
                        for c in 0..n {
                            dx[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    axpy(1.0, g, da);
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    axpy(1.0, g, db);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    axpy(1.0, g, da);
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    axpy(-1.0, g, db);
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(val(*b).data()) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(val(*a).data()) {
                        *d += gv * av;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    axpy(1.0, g, dx);
                }
                let n = val(*bias).len();
                if let Some(db) = slot(nodes, adj, *bias) {
                    for row in g.chunks(n) {
                        axpy(1.0, row, db);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    axpy(*c, g, dx);
                }
            }
            Op::AddConst(x) => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    axpy(1.0, g, dx);
                }
            }
            Op::DivScalar(x, s) => {
                let sv = val(*s).data()[0];
                if let Some(dx) = slot(nodes, adj, *x) {
                    axpy(1.0 / sv, g, dx);
                }
                let xg: f64 = g.iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                if let Some(ds) = slot(nodes, adj, *s) {
                    ds[0] -= xg / (sv * sv);
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(*x).data()) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d += gv * y;
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(*x).data()) {
                        if xv >= *lo && xv <= *hi {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let n = out.cols();
                if let Some(dx) = slot(nodes, adj, *x) {
                    for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (gv - gy);
                        }
                    }
                }
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let n = out.cols();
                let gam = val(*gamma).data();
                if let Some(dg) = slot(nodes, adj, *gamma) {
                    for (gr, xr) in g.chunks(n).zip(normalized.chunks(n)) {
                        for ((d, &gv), &xh) in dg.iter_mut().zip(gr).zip(xr) {
                            *d += gv * xh;
                        }
                    }
                }
                if let Some(db) = slot(nodes, adj, *beta) {
                    for gr in g.chunks(n) {
                        axpy(1.0, gr, db);
                    }
                }
                if let Some(dx) = slot(nodes, adj, *x) {
                    let mut dxh = vec![0.0; n];
                    for (r, (gr, xr)) in g.chunks(n).zip(normalized.chunks(n)).enumerate() {
                        for j in 0..n {
                            dxh[j] = gr[j] * gam[j];
                        }
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let dr = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            dr[j] += inv_std[r] * (dxh[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if let Some(dp) = slot(nodes, adj, p) {
                        for r in 0..m {
                            axpy(1.0, &g[r * total + offset..r * total + offset + w], &mut dp[r * w..(r + 1) * w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    if let Some(dp) = slot(nodes, adj, p) {
                        axpy(1.0, &g[offset..offset + len], dp);
                    }
                    offset += len;
                }
            }
            Op::SliceCols(x, start) => {
                let n = val(*x).cols();
                let w = out.cols();
                if let Some(dx) = slot(nodes, adj, *x) {
                    for (r, gr) in g.chunks(w).enumerate() {
                        axpy(1.0, gr, &mut dx[r * n + start..r * n + start + w]);
                    }
                }
            }
            Op::GatherRows(x, indices) => {
                let n = out.cols();
                if let Some(dx) = slot(nodes, adj, *x) {
                    for (gr, &src) in g.chunks(n).zip(indices) {
                        axpy(1.0, gr, &mut dx[src * n..(src + 1) * n]);
                    }
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = (val(*x).rows(), val(*x).cols());
                if let Some(dx) = slot(nodes, adj, *x) {
                    for row in dx.chunks_mut(n) {
                        axpy(1.0 / m as f64, &g[..n], row);
                    }
                }
            }
            Op::MeanCols(x) => {
                let n = val(*x).cols();
                if let Some(dx) = slot(nodes, adj, *x) {
                    for (row, &gv) in dx.chunks_mut(n).zip(g) {
                        row.iter_mut().for_each(|d| *d += gv / n as f64);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                if let Some(dx) = slot(nodes, adj, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::Conv1d {
                x,
                kernel,
                stride,
                pad,
                patches,
            } => {
                let tk = val(*kernel);
                let (k, d_in, d_out) = (tk.shape()[0], tk.shape()[1], tk.shape()[2]);
                let out_len = out.rows();
                let width = k * d_in;
                if let Some(dk) = slot(nodes, adj, *kernel) {
                    gemm_tn(width, out_len, d_out, patches, g, dk, true);
                }
                let len = val(*x).rows();
                if let Some(dx) = slot(nodes, adj, *x) {
                    let mut dpatches = vec![0.0; out_len * width];
                    gemm_nt(out_len, d_out, width, g, tk.data(), &mut dpatches, false);
                    for t in 0..out_len {
                        for j in 0..k {
                            let src = (t * stride + j) as isize - *pad as isize;
                            if src < 0 || src as usize >= len {
                                continue;
                            }
                            let src = src as usize;
                            axpy(
                                1.0,
                                &dpatches[t * width + j * d_in..t * width + (j + 1) * d_in],
                                &mut dx[src * d_in..(src + 1) * d_in],
                            );
                        }
                    }
                }
            }
            Op::L2NormalizeRows(x, norms) => {
                let n = out.cols();
                if let Some(dx) = slot(nodes, adj, *x) {
                    for (r, (gr, yr)) in g.chunks(n).zip(out.data().chunks(n)).enumerate() {
                        let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        let dr = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            dr[j] += (gr[j] - yr[j] * gy) / norms[r];
                        }
                    }
                }
            }
            Op::CrossEntropyRows(logits, targets, probs) => {
                let n = val(*logits).cols();
                let m = targets.len() as f64;
                if let Some(dl) = slot(nodes, adj, *logits) {
                    for (r, (dr, pr)) in dl.chunks_mut(n).zip(probs.chunks(n)).enumerate() {
                        for (j, (d, &p)) in dr.iter_mut().zip(pr).enumerate() {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            *d += g[0] * (p - onehot) / m;
                        }
                    }
                }
            }
        }
    }
}
