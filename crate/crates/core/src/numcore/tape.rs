//! Dynamic reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and enough
//! context to run its backward rule. Nodes are appended in evaluation order,
//! so the node list is already topologically sorted and backward is a single
//! reverse sweep.

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// matrix plus a row vector broadcast over rows
    AddRow(Var, Var),
    Scale(Var, f64),
    /// tensor times a one-element tensor
    ScaleBy(Var, Var),
    MulConst(Var, Tensor),
    Exp(Var),
    LogFloor(Var, f64),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
        mask: Option<Vec<bool>>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    WeightedSum(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records operations for one forward pass. Never shared across threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GeLU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if a.rank() != 2 || b.rank() != 2 || k != k2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &bd[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b`
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if a.rank() != 2 || b.rank() != 2 || k != k2 {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let ar = &ad[p * m..(p + 1) * m];
        let br = &bd[p * n..(p + 1) * n];
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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
        self.nodes[v.0].tracked
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(name)?;
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_nt(self.value(a), self.value(b))?;
        self.push("matmul_nt", value, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.rank() != 2 || bv.len() != xv.cols() {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let c = xv.cols();
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        self.push("add_row", value, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push("scale", value, Op::Scale(x, s), &[x])
    }

    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v * sv);
        self.push("scale_by", value, Op::ScaleBy(x, s), &[x, s])
    }

    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let value = self.value(x).zip_map(&c, |a, b| a * b)?;
        self.push("mul_const", value, Op::MulConst(x, c), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::exp);
        self.push("exp", value, Op::Exp(x), &[x])
    }

    /// `ln(max(x, floor))`
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(floor).ln());
        self.push("log_floor", value, Op::LogFloor(x, floor), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu_scalar);
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).softmax(axis)?;
        self.push("softmax", value, Op::Softmax { x, axis }, &[x])
    }

    /// Log-softmax along `axis`. With a mask, only `true` entries take part in
    /// the normalization; masked-out entries are written as 0 and receive no
    /// gradient. A lane without any candidate is all zeros.
    pub fn log_softmax(&mut self, x: Var, axis: usize, mask: Option<Vec<bool>>) -> Result<Var> {
        let xv = self.value(x);
        let (outer, extent, inner) = xv.axis_layout(axis)?;
        if let Some(m) = &mask {
            if m.len() != xv.len() {
                return Err(Error::shape("log_softmax", xv.shape(), &[m.len()]));
            }
        }
        let on = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
        let d = xv.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let idx: Vec<usize> = (0..extent)
                    .map(|e| base + e * inner)
                    .filter(|&k| on(k))
                    .collect();
                if idx.is_empty() {
                    continue;
                }
                let max = idx.iter().map(|&k| d[k]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + idx.iter().map(|&k| (d[k] - max).exp()).sum::<f64>().ln();
                for &k in &idx {
                    out[k] = d[k] - lse;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax { x, axis, mask }, &[x])
    }

    /// Row-wise layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("layer_norm", xv.shape(), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = xv.clone();
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for (hrow, orow) in xhat
            .data_mut()
            .chunks_mut(c)
            .zip(out.data_mut().chunks_mut(c))
        {
            let mean = hrow.iter().sum::<f64>() / c as f64;
            let var = hrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                hrow[j] = (hrow[j] - mean) * inv;
                orow[j] = g[j] * hrow[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let norms: Vec<f64> = xv
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
            .collect();
        let mut value = xv.clone();
        for (row, n) in value.data_mut().chunks_mut(c).zip(&norms) {
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.push(
            "normalize_rows",
            value,
            Op::NormalizeRows { x, norms },
            &[x],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != r {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), v.shape()));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, len)?;
        self.push("slice_rows", value, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c {
            return Err(Error::shape("slice_cols", xv.shape(), &[start, len]));
        }
        let data: Vec<f64> = xv
            .data()
            .chunks(c)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(vec![xv.rows(), len], data)?;
        self.push("slice_cols", value, Op::SliceCols { x, start }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let value = self.value(x).gather_rows(&idx)?;
        self.push("gather_rows", value, Op::GatherRows { x, idx }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// `Σ w ⊙ x` for a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor) -> Result<Var> {
        if w.shape() != self.shape(x) {
            return Err(Error::shape("weighted_sum", self.shape(x), w.shape()));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a * b)
            .sum();
        self.push(
            "weighted_sum",
            Tensor::scalar(s),
            Op::WeightedSum(x, w),
            &[x],
        )
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut local: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        local[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].tracked {
                continue;
            }
            let Some(g) = local[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                local[id] = Some(g);
                continue;
            }
            self.backprop(id, &g, &mut local)?;
        }
        if self.grads.len() < n {
            self.grads.resize_with(n, || None);
        }
        for (id, g) in local.into_iter().enumerate() {
            if let Some(g) = g {
                g.ensure_finite("backward")?;
                match &mut self.grads[id] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backprop(&self, id: usize, g: &Tensor, local: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut local[v.0] {
                Some(a) => a.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, matmul_nt(g, val(*b))?);
                acc(*b, matmul_tn(val(*a), g)?);
            }
            Op::MatMulNt(a, b) => {
                acc(*a, g.matmul(val(*b))?);
                acc(*b, matmul_tn(g, val(*a))?);
            }
            Op::Transpose(a) => acc(*a, g.transpose()?),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y)?);
                acc(*b, g.zip_map(val(*a), |x, y| x * y)?);
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone());
                let c = g.cols();
                let mut db = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*b, Tensor::new(val(*b).shape().to_vec(), db)?);
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * s)),
            Op::ScaleBy(x, s) => {
                let sv = val(*s).item();
                acc(*x, g.map(|v| v * sv));
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(a, b)| a * b)
                    .sum();
                acc(*s, Tensor::new(val(*s).shape().to_vec(), vec![ds])?);
            }
            Op::MulConst(x, c) => acc(*x, g.zip_map(c, |a, b| a * b)?),
            Op::Exp(x) => acc(*x, g.zip_map(&node.value, |a, y| a * y)?),
            Op::LogFloor(x, floor) => acc(
                *x,
                g.zip_map(val(*x), |a, v| if v > *floor { a / v } else { 0.0 })?,
            ),
            Op::Gelu(x) => acc(
                *x,
                g.zip_map(val(*x), |a, v| {
                    a * (std_normal_cdf(v) + v * std_normal_pdf(v))
                })?,
            ),
            Op::Softmax { x, axis } => {
                let s = &node.value;
                let (outer, extent, inner) = lanes(s.shape(), *axis);
                let mut dx = vec![0.0; s.len()];
                let (sd, gd) = (s.data(), g.data());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * extent * inner + i;
                        let dot: f64 = (0..extent)
                            .map(|e| sd[base + e * inner] * gd[base + e * inner])
                            .sum();
                        for e in 0..extent {
                            let k = base + e * inner;
                            dx[k] = sd[k] * (gd[k] - dot);
                        }
                    }
                }
                acc(*x, Tensor::new(s.shape().to_vec(), dx)?);
            }
            Op::LogSoftmax { x, axis, mask } => {
                let y = &node.value;
                let (outer, extent, inner) = lanes(y.shape(), *axis);
                let on = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                let mut dx = vec![0.0; y.len()];
                let (yd, gd) = (y.data(), g.data());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * extent * inner + i;
                        let idx: Vec<usize> = (0..extent)
                            .map(|e| base + e * inner)
                            .filter(|&k| on(k))
                            .collect();
                        let gsum: f64 = idx.iter().map(|&k| gd[k]).sum();
                        for &k in &idx {
                            dx[k] = gd[k] - yd[k].exp() * gsum;
                        }
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = g.cols();
                let gm = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for (r, ((grow, hrow), inv)) in g
                    .data()
                    .chunks(c)
                    .zip(xhat.data().chunks(c))
                    .zip(inv_std)
                    .enumerate()
                {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..c {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                        let dh = grow[j] * gm[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[j];
                    }
                    let n = c as f64;
                    for j in 0..c {
                        let dh = grow[j] * gm[j];
                        dx[r * c + j] = inv / n * (n * dh - sum_dh - hrow[j] * sum_dh_h);
                    }
                }
                acc(*x, Tensor::new(g.shape().to_vec(), dx)?);
                acc(*gamma, Tensor::new(val(*gamma).shape().to_vec(), dgamma)?);
                acc(*beta, Tensor::new(val(*beta).shape().to_vec(), dbeta)?);
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for (r, ((yr, gr), n)) in y
                    .data()
                    .chunks(c)
                    .zip(g.data().chunks(c))
                    .zip(norms)
                    .enumerate()
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let r = val(p).rows();
                    acc(p, g.slice_rows(start, r)?.reshape(val(p).shape())?);
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut start = 0;
                for &p in parts {
                    let c = val(p).cols();
                    let data: Vec<f64> = g
                        .data()
                        .chunks(total)
                        .flat_map(|r| r[start..start + c].iter().copied())
                        .collect();
                    acc(p, Tensor::new(val(p).shape().to_vec(), data)?);
                    start += c;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (c, len) = (xv.cols(), g.cols());
                let mut dx = Tensor::zeros(xv.shape());
                for (drow, grow) in dx.data_mut().chunks_mut(c).zip(g.data().chunks(len)) {
                    drow[*start..start + len].copy_from_slice(grow);
                }
                acc(*x, dx);
            }
            Op::GatherRows { x, idx } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for (grow, &i) in g.data().chunks(c).zip(idx) {
                    for (d, v) in dx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(grow) {
                        *d += v;
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let gv = g.item();
                acc(*x, Tensor::full(val(*x).shape(), gv));
            }
            Op::WeightedSum(x, w) => {
                let gv = g.item();
                acc(*x, w.map(|v| v * gv));
            }
        }
        Ok(())
    }
}
