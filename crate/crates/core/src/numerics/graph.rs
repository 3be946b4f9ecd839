use std::collections::HashMap;

use rand_core::RngCore;

use super::{NumericsError, ParamId, ParamStore, Tensor};
use crate::rng;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Softmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: usize, ids: Vec<u32> },
    Reshape(usize),
    Permute { x: usize, axes: Vec<usize> },
    Concat(Vec<usize>),
    Slice { x: usize, start: usize },
    Stack(Vec<usize>),
    Select { x: usize, index: usize },
    Sum(usize),
    Mean(usize),
    CrossEntropy { logits: usize, targets: Vec<u32>, smoothing: f64, ignore: Option<u32>, probs: Vec<f64>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so reverse
/// index order is a valid reverse topological order for backward.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

/// Node gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().filter_map(|&(id, node)| self.grads[node].as_deref().map(|g| (id, g)))
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() }
}

const SMALL_GEMM: usize = 8192;

/// `c[m×n] = beta·c + op(a)[m×inner] · op(b)[inner×n]`, where `ta`/`tb` mean
/// the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, inner: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if inner == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m) } else { (inner, 1) };
    let (rsb, csb) = if tb { (1, inner) } else { (n, 1) };
    if m * inner * n <= SMALL_GEMM {
        // Packing dominates for tiny products such as per-head attention.
        let c = &mut c[..m * n];
        if beta == 0.0 {
            c.fill(0.0);
        }
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            for p in 0..inner {
                let x = a[i * rsa + p * csa];
                if tb {
                    row.iter_mut().enumerate().for_each(|(j, r)| *r += x * b[p + j * inner]);
                } else {
                    row.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(r, y)| *r += x * y);
                }
            }
        }
        return;
    }
    debug_assert!(a.len() >= m * inner && b.len() >= inner * n && c.len() >= m * n);
    // SAFETY: the slices hold at least the m×inner, inner×n and m×n elements
    // addressed by these strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            inner,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, out_shape);
    }
    // Copy contiguous runs when the last axis stays last.
    let inner = if axes.last() == Some(&(rank - 1)) { shape[rank - 1] } else { 1 };
    let outer_rank = if inner > 1 { rank - 1 } else { rank };
    let mut idx = vec![0usize; outer_rank];
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        if inner > 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.push(data[base]);
        }
        let mut d = outer_rank;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const LN_EPS: f64 = 1e-6;

impl Graph {
    /// A graph that records gradients.
    pub fn new() -> Self {
        Self { grad_enabled: true, ..Self::default() }
    }

    /// A graph for inference; [`Graph::backward`] on it yields no gradients.
    pub fn inference() -> Self {
        Self::default()
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, i: usize) -> &[f64] {
        self.nodes[i].value.data()
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Tracked input whose gradient can be read from [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Places a parameter on the tape (once per graph; later calls reuse the node).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node { value: store.get(id).value.clone(), op: Op::Param, requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Matrix product of the last two axes. Both operands are 2-D, or both
    /// 3-D with the same leading batch size. `ta`/`tb` transpose the operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rank = sa.len();
        if !(rank == 2 || rank == 3) || sb.len() != rank || (rank == 3 && sa[0] != sb[0]) {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let batch = if rank == 3 { sa[0] } else { 1 };
        let (ar, ac) = (sa[rank - 2], sa[rank - 1]);
        let (br, bc) = (sb[rank - 2], sb[rank - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(m, k, n, &self.data(a.0)[bi * m * k..], ta, &self.data(b.0)[bi * k * n..], tb, &mut out[bi * m * n..(bi + 1) * m * n], 0.0);
        }
        let shape = if rank == 3 { vec![batch, m, n] } else { vec![m, n] };
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a: a.0, b: b.0, ta, tb }, &[a.0, b.0]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_t(a, b, false, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.data(a.0).iter().zip(self.data(b.0)).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a.0).iter().map(|x| f(*x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let t = self.zip(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let t = self.zip(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let t = self.zip(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    /// Adds a vector to every row (broadcast over all leading axes).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(mismatch("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias.0).to_vec();
        let mut out = self.data(x.0).to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(v, b)| *v += b);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::AddBias(x.0, bias.0), &[x.0, bias.0]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v * c);
        self.push(t, Op::Scale(x.0, c), &[x.0])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v + c);
        self.push(t, Op::AddScalar(x.0), &[x.0])
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        self.push(t, Op::Sigmoid(x.0), &[x.0])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        self.push(t, Op::Tanh(x.0), &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x.0), &[x.0])
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = self.value(x).last_dim();
        let t = Tensor::new(self.shape(x).to_vec(), super::softmax_rows(self.data(x.0), n)).expect("shape");
        self.push(t, Op::Softmax(x.0), &[x.0])
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let n = self.value(x).last_dim();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (g, b) = (self.data(gain.0).to_vec(), self.data(bias.0).to_vec());
        let src = self.data(x.0);
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(src.len() / n.max(1));
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, rstd }, &[x.0, gain.0, bias.0]))
    }

    /// Gathers rows of a `[vocab, width]` table; output is `[ids.len(), width]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var, NumericsError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(mismatch("embedding", &shape, &[]));
        }
        let (vocab, width) = (shape[0], shape[1]);
        let src = self.data(table.0);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id as usize >= vocab {
                return Err(NumericsError::TargetOutOfRange { target: id, vocab });
            }
            out.extend_from_slice(&src[id as usize * width..(id as usize + 1) * width]);
        }
        let t = Tensor::new(vec![ids.len(), width], out)?;
        Ok(self.push(t, Op::Embedding { table: table.0, ids: ids.to_vec() }, &[table.0]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let t = self.value(x).clone().with_shape(shape.to_vec());
        Ok(self.push(t, Op::Reshape(x.0), &[x.0]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || !axes.iter().all(|&a| a < shape.len() && !std::mem::replace(&mut seen[a], true)) {
            return Err(mismatch("permute", &shape, axes));
        }
        let (data, out_shape) = permute_data(self.data(x.0), &shape, axes);
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Permute { x: x.0, axes: axes.to_vec() }, &[x.0]))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).last_dim()).collect();
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(mismatch("concat", &first, s));
            }
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p.0)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(ids.clone()), &ids))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let w = self.value(x).last_dim();
        if start + len > w {
            return Err(mismatch("slice_last", &shape, &[start, len]));
        }
        let out: Vec<f64> = self.data(x.0).chunks(w).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Slice { x: x.0, start }, &[x.0]))
    }

    /// Stacks `k` tensors of shape `[b, d]` into `[b, k, d]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let s = self.shape(parts[0]).to_vec();
        if s.len() != 2 || parts.iter().any(|p| self.shape(*p) != s.as_slice()) {
            return Err(mismatch("stack", &s, &[parts.len()]));
        }
        let (b, d, k) = (s[0], s[1], parts.len());
        let mut out = vec![0.0; b * k * d];
        for (j, p) in parts.iter().enumerate() {
            let src = self.data(p.0);
            for i in 0..b {
                out[(i * k + j) * d..(i * k + j + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::new(vec![b, k, d], out)?, Op::Stack(ids.clone()), &ids))
    }

    /// Slice `[:, index, :]` of a `[b, k, d]` tensor.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || index >= s[1] {
            return Err(mismatch("select", &s, &[index]));
        }
        let (b, k, d) = (s[0], s[1], s[2]);
        let src = self.data(x.0);
        let mut out = Vec::with_capacity(b * d);
        for i in 0..b {
            out.extend_from_slice(&src[(i * k + index) * d..(i * k + index + 1) * d]);
        }
        Ok(self.push(Tensor::new(vec![b, d], out)?, Op::Select { x: x.0, index }, &[x.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x.0).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.data(x.0).iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x.0), &[x.0])
    }

    /// Inverted dropout with a seeded Bernoulli mask; identity when `rate` is 0
    /// or the graph is in inference mode.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl RngCore) -> Result<Var, NumericsError> {
        if rate <= 0.0 || !self.grad_enabled {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len()).map(|_| if rng::unit(rng) < rate { 0.0 } else { keep }).collect();
        let m = self.constant(Tensor::new(self.shape(x).to_vec(), mask)?);
        self.mul(x, m)
    }

    /// Mean label-smoothed cross entropy over rows of `[n, V]` logits whose
    /// target is not `ignore`. The smoothed target puts `1 - smoothing` on the
    /// gold id plus `smoothing / V` on every id. With no counted rows the
    /// loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], smoothing: f64, ignore: Option<u32>) -> Result<Var, NumericsError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(mismatch("cross_entropy", &shape, &[targets.len()]));
        }
        let v = shape[1];
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= v && Some(t) != ignore) {
            return Err(NumericsError::TargetOutOfRange { target: t, vocab: v });
        }
        let mut probs = Vec::with_capacity(targets.len() * v);
        let mut total = 0.0;
        let mut count = 0;
        for (row, &t) in self.data(logits.0).chunks(v).zip(targets) {
            let lp = super::log_softmax(row);
            probs.extend(lp.iter().map(|l| l.exp()));
            if Some(t) == ignore {
                continue;
            }
            count += 1;
            let uniform: f64 = lp.iter().sum::<f64>() / v as f64;
            total -= (1.0 - smoothing) * lp[t as usize] + smoothing * uniform;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let op = Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), smoothing, ignore, probs, count };
        Ok(self.push(Tensor::scalar(loss), op, &[logits.0]))
    }

    /// Reverse sweep from a scalar. The graph itself is not consumed, so the
    /// sweep may be repeated.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 || shape.len() > 1 {
            return Err(NumericsError::NotScalar(shape.to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v.0)).collect();
        Ok(Gradients { grads, params })
    }

    /// Backward then accumulate parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<(), NumericsError> {
        let g = self.backward(loss)?;
        store.accumulate(&g);
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], i: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let len = self.nodes[i].value.len();
        Some(grads[i].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let rank = sa.len();
                let batch = if rank == 3 { sa[0] } else { 1 };
                let (m, k) = if *ta { (sa[rank - 1], sa[rank - 2]) } else { (sa[rank - 2], sa[rank - 1]) };
                let n = if *tb { sb[rank - 2] } else { sb[rank - 1] };
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for bi in 0..batch {
                        let (gc, bm, out) = (&g[bi * m * n..], &bd[bi * k * n..], &mut ga[bi * m * k..(bi + 1) * m * k]);
                        if *ta {
                            gemm(k, n, m, bm, *tb, gc, true, out, 1.0);
                        } else {
                            gemm(m, n, k, gc, false, bm, !*tb, out, 1.0);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for bi in 0..batch {
                        let (gc, am, out) = (&g[bi * m * n..], &ad[bi * m * k..], &mut gb[bi * k * n..(bi + 1) * k * n]);
                        if *tb {
                            gemm(n, m, k, gc, true, am, *ta, out, 1.0);
                        } else {
                            gemm(k, m, n, am, !*ta, gc, false, out, 1.0);
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, g), bv) in ga.iter_mut().zip(g).zip(bd) {
                        *d += g * bv;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, g), av) in gb.iter_mut().zip(g).zip(ad) {
                        *d += g * av;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, g), y) in gx.iter_mut().zip(g).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, g), y) in gx.iter_mut().zip(g).zip(y) {
                        *d += g * (1.0 - y * y);
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, g), xv) in gx.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((dx, gy), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[j] += yr[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = node.value.last_dim();
                let gv = self.data(*gain).to_vec();
                if let Some(gg) = self.slot(grads, *gain) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for gr in g.chunks(n) {
                        gb.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, ((dx, gr), hr)) in gx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(&gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let width = node.value.last_dim();
                if let Some(gt) = self.slot(grads, *table) {
                    for (row, &id) in g.chunks(width).zip(ids) {
                        let dst = &mut gt[id as usize * width..(id as usize + 1) * width];
                        dst.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inverse);
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(&back).for_each(|(d, g)| *d += g);
                }
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.last_dim();
                    if let Some(gp) = self.slot(grads, p) {
                        for (dst, src) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            dst.iter_mut().zip(&src[offset..offset + w]).for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let len = node.value.last_dim();
                let w = self.nodes[*x].value.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for (dst, src) in gx.chunks_mut(w).zip(g.chunks(len)) {
                        dst[*start..start + len].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Stack(parts) => {
                let s = node.value.shape();
                let (b, k, d) = (s[0], s[1], s[2]);
                for (j, &p) in parts.iter().enumerate() {
                    if let Some(gp) = self.slot(grads, p) {
                        for i in 0..b {
                            let src = &g[(i * k + j) * d..(i * k + j + 1) * d];
                            gp[i * d..(i + 1) * d].iter_mut().zip(src).for_each(|(a, g)| *a += g);
                        }
                    }
                }
            }
            Op::Select { x, index } => {
                let s = self.nodes[*x].value.shape();
                let (b, k, d) = (s[0], s[1], s[2]);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..b {
                        let dst = &mut gx[(i * k + index) * d..(i * k + index + 1) * d];
                        dst.iter_mut().zip(&g[i * d..(i + 1) * d]).for_each(|(a, g)| *a += g);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let c = g[0] / gx.len().max(1) as f64;
                    gx.iter_mut().for_each(|d| *d += c);
                }
            }
            Op::CrossEntropy { logits, targets, smoothing, ignore, probs, count } => {
                if *count == 0 {
                    return;
                }
                let v = self.nodes[*logits].value.last_dim();
                let scale = g[0] / *count as f64;
                let uniform = smoothing / v as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for ((dst, p), &t) in gl.chunks_mut(v).zip(probs.chunks(v)).zip(targets) {
                        if Some(t) == *ignore {
                            continue;
                        }
                        for j in 0..v {
                            let q = uniform + if j == t as usize { 1.0 - smoothing } else { 0.0 };
                            dst[j] += scale * (p[j] - q);
                        }
                    }
                }
            }
        }
    }
}
