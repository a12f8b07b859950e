use super::kernels::{self, dot, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    MatMulBt(Var, Var),
    Linear(Var, Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows { table: Var, idx: Vec<Option<usize>> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, keep: Vec<bool>, probs: Vec<f64>, count: usize },
    BceWithLogits { logits: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a
/// topological order, so the backward sweep is a single reverse scan.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    swept: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.swept = false;
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward sweep, `None` when `v` does not require
    /// grad or received no contribution.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_bt", a)?;
        let (n, k2) = self.dims2("matmul_bt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMulBt(a, b)))
    }

    /// `x · w + bias`, bias broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (m, k) = self.dims2("linear", x)?;
        let (k2, n) = self.dims2("linear", w)?;
        if k != k2 {
            return Err(Error::shape("linear", self.shape(x), self.shape(w)));
        }
        if self.value(bias).len() != n {
            return Err(Error::shape("linear bias", self.shape(w), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(b);
        }
        gemm_nn(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[x, w, bias]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::Linear(x, w, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let out = Tensor::from_fn(v.shape(), |i| v.data()[i] * c);
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::from_fn(v.shape(), |i| kernels::gelu(v.data()[i]));
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Gelu(a))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_impl(x, false)
    }

    /// Trailing-axis softmax where row `i` of an `r×c` matrix only sees
    /// columns `j <= i + (c - r)`; masked entries come out exactly zero.
    pub fn softmax_causal(&mut self, x: Var) -> Var {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Var {
        let mut out = self.value(x).clone();
        let (r, c) = (out.rows(), out.cols());
        let offset = c.saturating_sub(r);
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            let valid = if causal { (i + offset + 1).min(c) } else { c };
            kernels::softmax_slice(row, valid);
        }
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", xv.shape(), self.shape(gain)));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.rows();
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row lookup; `None` produces a zero row.
    pub fn gather_rows(&mut self, table: Var, idx: &[Option<usize>]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = (t.rows(), t.cols());
        let mut out = vec![0.0; idx.len() * d];
        for (i, ix) in idx.iter().enumerate() {
            if let Some(r) = *ix {
                if r >= rows {
                    return Err(Error::shape("gather_rows", t.shape(), &[r]));
                }
                out[i * d..(i + 1) * d].copy_from_slice(t.row(r));
            }
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], out)?,
            rg,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != d {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), v.shape()));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            rg,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), v.shape()));
            }
            total += v.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            rg,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if start + len > v.rows() {
            return Err(Error::shape("slice_rows", v.shape(), &[start, len]));
        }
        let d = v.cols();
        let out = v.data()[start * d..(start + len) * d].to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![len, d], out)?, rg, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let d = v.cols();
        if start + len > d {
            return Err(Error::shape("slice_cols", v.shape(), &[start, len]));
        }
        let rows = v.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![rows, len], out)?, rg, Op::SliceCols { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(shape.to_vec(), v.data().to_vec())
            .map_err(|_| Error::shape("reshape", v.shape(), shape))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::Reshape(x)))
    }

    /// Mean over rows, giving a `1×cols` tensor.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_raw(vec![1, c], out), rg, Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// Mean negative log-likelihood over the positions where `ignore` is false.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: &[bool]) -> Result<Var> {
        let (n, v) = self.dims2("cross_entropy", logits)?;
        if targets.len() != n || ignore.len() != n {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let keep: Vec<bool> = ignore.iter().map(|m| !m).collect();
        let count = keep.iter().filter(|k| **k).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for i in 0..n {
            if !keep[i] {
                continue;
            }
            let t = targets[i];
            if t >= v {
                return Err(Error::shape("cross_entropy target", &[t], &[v]));
            }
            let row = &mut probs[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            kernels::softmax_slice(row, v);
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / count as f64),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                keep,
                probs,
                count,
            },
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels` in [0,1].
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != labels.len() {
            return Err(Error::shape("bce_with_logits", self.shape(logits), &[labels.len()]));
        }
        if z.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let loss = z
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / z.len() as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. A tape supports one sweep; call
    /// [`Tape::reset`] (or start a new tape) before the next one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.swept {
            return Err(Error::StaleTape);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalar(lv.shape().to_vec()));
        }
        self.swept = true;
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
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // Accumulator for input `v`, or None when it needs no gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let len = nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(ga) = acc!(*a) {
                    gemm_nt(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = acc!(*b) {
                    gemm_tn(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if let Some(ga) = acc!(*a) {
                    gemm_nn(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = acc!(*b) {
                    gemm_tn(g, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Linear(x, w, b) => {
                let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[1];
                if let Some(gx) = acc!(*x) {
                    gemm_nt(g, self.value(*w).data(), gx, m, n, k);
                }
                if let Some(gw) = acc!(*w) {
                    gemm_tn(self.value(*x).data(), g, gw, m, k, n);
                }
                if let Some(gb) = acc!(*b) {
                    for row in g.chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = acc!(v) {
                        for (o, x) in ga.iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = acc!(*a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(self.value(*b).data()) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(self.value(*a).data()) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = acc!(*a) {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += x * c;
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = acc!(*a) {
                    for ((o, x), z) in ga.iter_mut().zip(g).zip(self.value(*a).data()) {
                        *o += x * kernels::gelu_grad(*z);
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = acc!(*x) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    for ((gy_row, y_row), gx_row) in
                        g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c))
                    {
                        let s = dot(gy_row, y_row);
                        for j in 0..c {
                            gx_row[j] += y_row[j] * (gy_row[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gv = self.value(*gain).data();
                if let Some(gx) = acc!(*x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let sum: f64 = dxhat.iter().sum();
                        let sum_h = dot(&dxhat, hr);
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += inv / d as f64 * (d as f64 * dxhat[j] - sum - hr[j] * sum_h);
                        }
                    }
                }
                if let Some(gg) = acc!(*gain) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = acc!(*bias) {
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                if let Some(gt) = acc!(*table) {
                    let d = node.value.cols();
                    for (i, ix) in idx.iter().enumerate() {
                        if let Some(r) = *ix {
                            for j in 0..d {
                                gt[r * d + j] += g[i * d + j];
                            }
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(gp) = acc!(p) {
                        for (o, x) in gp.iter_mut().zip(&g[off..off + len]) {
                            *o += x;
                        }
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let c = nodes[p.0].value.cols();
                    if let Some(gp) = acc!(p) {
                        for (r, grow) in g.chunks(total).enumerate() {
                            for j in 0..c {
                                gp[r * c + j] += grow[off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let d = node.value.cols();
                if let Some(gx) = acc!(*x) {
                    for (o, v) in gx[start * d..].iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let d = nodes[x.0].value.cols();
                if let Some(gx) = acc!(*x) {
                    for (r, grow) in g.chunks(len).enumerate() {
                        for j in 0..len {
                            gx[r * d + start + j] += grow[j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc!(*x) {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::MeanRows(x) => {
                let r = nodes[x.0].value.rows();
                let c = node.value.cols();
                if let Some(gx) = acc!(*x) {
                    for row in gx.chunks_mut(c) {
                        for j in 0..c {
                            row[j] += g[j] / r as f64;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                keep,
                probs,
                count,
            } => {
                let v = nodes[logits.0].value.cols();
                if let Some(gl) = acc!(*logits) {
                    let scale = g[0] / *count as f64;
                    for (i, &t) in targets.iter().enumerate() {
                        if !keep[i] {
                            continue;
                        }
                        let row = &mut gl[i * v..(i + 1) * v];
                        let p = &probs[i * v..(i + 1) * v];
                        for j in 0..v {
                            row[j] += scale * p[j];
                        }
                        row[t] -= scale;
                    }
                }
            }
            Op::BceWithLogits { logits, labels } => {
                let z = nodes[logits.0].value.data();
                if let Some(gl) = acc!(*logits) {
                    let scale = g[0] / labels.len() as f64;
                    for ((o, &z), &y) in gl.iter_mut().zip(z).zip(labels) {
                        *o += scale * (sigmoid(z) - y);
                    }
                }
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
