use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::{NumericsError, Tensor};
use crate::attnmask::AttentionMask;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Negative-control hook: deliberately breaks one backward rule so that
/// gradient checks can be shown to fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradFault {
    /// Scales the GELU derivative by 1.01.
    GeluDerivative,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Transpose(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    SoftmaxMasked(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    RowCosineDistance(Var, Var),
    RowSmoothL1(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recorded computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the reverse pass is a single backwards sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<GradFault>,
}

type Result<T> = std::result::Result<T, NumericsError>;

fn mismatch(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn gelu_derivative(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

const NORM_FLOOR: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn inject_fault(&mut self, fault: Option<GradFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op });
        }
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(mismatch(
                "matmul",
                format!("{:?} · {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out = Tensor::matmul_raw(ta, tb);
        let rg = self.rg(&[a, b]);
        self.push("matmul", out, Op::MatMul(a, b), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push("add", out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push("sub", out, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push("mul", out, Op::Mul(a, b), rg)
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let n = tx.cols();
        if tr.len() != n || tx.shape().len() != 2 {
            return Err(mismatch("add_row", format!("{:?} + {:?}", tx.shape(), tr.shape())));
        }
        let mut out = tx.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, r) in chunk.iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        let rg = self.rg(&[x, row]);
        self.push("add_row", out, Op::AddRow(x, row), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push("scale", out, Op::Scale(x, s), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(NumericsError::Empty { op: "mean" });
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(mismatch("transpose", format!("{:?}", tx.shape())));
        }
        let out = tx.transpose();
        let rg = self.rg(&[x]);
        self.push("transpose", out, Op::Transpose(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_scalar);
        let rg = self.rg(&[x]);
        self.push("gelu", out, Op::Gelu(x), rg)
    }

    /// Per-row layer normalisation over the last axis, then `gain ⊙ x̂ + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(mismatch(
                "layernorm",
                format!("width {d}, gain {:?}, bias {:?}", self.value(gain).shape(), self.value(bias).shape()),
            ));
        }
        let rows = tx.rows();
        let mut xhat = Tensor::zeros(tx.shape());
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for (o, v) in xhat.data_mut()[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xhat.clone();
        for chunk in out.data_mut().chunks_mut(d) {
            for ((o, gv), bv) in chunk.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            "layernorm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Row softmax restricted to the columns the mask permits; denied
    /// columns get exactly zero probability.
    pub fn softmax_masked(&mut self, logits: Var, mask: &AttentionMask) -> Result<Var> {
        let tl = self.value(logits);
        let s = mask.size();
        if tl.shape() != [s, s] {
            return Err(mismatch(
                "softmax_masked",
                format!("logits {:?} vs mask {s}×{s}", tl.shape()),
            ));
        }
        let mut out = Tensor::zeros(&[s, s]);
        for q in 0..s {
            let row = tl.row(q);
            let mut max = f64::NEG_INFINITY;
            for (k, &v) in row.iter().enumerate() {
                if mask.allows(q, k) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(NumericsError::EmptyMaskRow { row: q });
            }
            let orow = &mut out.data_mut()[q * s..(q + 1) * s];
            let mut total = 0.0;
            for (k, &v) in row.iter().enumerate() {
                if mask.allows(q, k) {
                    let e = (v - max).exp();
                    orow[k] = e;
                    total += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let rg = self.rg(&[logits]);
        self.push("softmax_masked", out, Op::SoftmaxMasked(logits), rg)
    }

    /// Mean over rows of `−log softmax(row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (t, v) = (tl.rows(), tl.cols());
        if tl.shape().len() != 2 || targets.len() != t {
            return Err(mismatch(
                "cross_entropy",
                format!("logits {:?}, {} targets", tl.shape(), targets.len()),
            ));
        }
        if t == 0 {
            return Err(NumericsError::Empty { op: "cross_entropy" });
        }
        let mut probs = Tensor::zeros(tl.shape());
        let mut loss = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            if target >= v {
                return Err(NumericsError::TargetOutOfRange { target, vocab: v });
            }
            let row = tl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[target];
            for (p, x) in probs.data_mut()[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp() / z;
            }
        }
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss / t as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tx.rows()) {
            return Err(mismatch("gather_rows", format!("row {bad} of {}", tx.rows())));
        }
        let out = tx.select_rows(idx);
        let rg = self.rg(&[x]);
        self.push("gather_rows", out, Op::GatherRows(x, idx.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.value(p).cols()).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.cols() != cols {
                return Err(mismatch("concat_rows", format!("width {} vs {cols}", tp.cols())));
            }
            rows += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if start + len > tx.cols() {
            return Err(mismatch("slice_cols", format!("{start}+{len} > {}", tx.cols())));
        }
        let rows = tx.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let rg = self.rg(&[x]);
        self.push("slice_cols", out, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(mismatch("concat_cols", "row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(parts);
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Negative cosine similarity between matching rows; returns `[M]`.
    pub fn row_cosine_distance(&mut self, p: Var, t: Var) -> Result<Var> {
        self.same_shape("row_cosine_distance", p, t)?;
        let (tp, tt) = (self.value(p), self.value(t));
        let mut out = Vec::with_capacity(tp.rows());
        for r in 0..tp.rows() {
            let (a, b) = (tp.row(r), tt.row(r));
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na <= NORM_FLOOR || nb <= NORM_FLOOR {
                return Err(NumericsError::NearZeroNorm { row: r });
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            out.push(-(dot / (na * nb)));
        }
        let rg = self.rg(&[p, t]);
        self.push("row_cosine_distance", Tensor::vector(out), Op::RowCosineDistance(p, t), rg)
    }

    /// Smooth-L1 (transition at 1) averaged over each row; returns `[M]`.
    pub fn row_smooth_l1(&mut self, p: Var, t: Var) -> Result<Var> {
        self.same_shape("row_smooth_l1", p, t)?;
        let (tp, tt) = (self.value(p), self.value(t));
        let d = tp.cols() as f64;
        let out = (0..tp.rows())
            .map(|r| {
                tp.row(r)
                    .iter()
                    .zip(tt.row(r))
                    .map(|(x, y)| smooth_l1_elem(x - y))
                    .sum::<f64>()
                    / d
            })
            .collect();
        let rg = self.rg(&[p, t]);
        self.push("row_smooth_l1", Tensor::vector(out), Op::RowSmoothL1(p, t), rg)
    }

    /// Reverse sweep from a scalar `loss`; leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let tl = self.value(loss);
        if tl.len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: tl.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(tl.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.local_grads(i, &g);
            for (v, dg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dg),
                    slot @ None => *slot = Some(dg),
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut out = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    out.push((*a, Tensor::matmul_nt_raw(g, tb)));
                }
                if self.requires_grad(*b) {
                    out.push((*b, Tensor::matmul_tn_raw(ta, g)));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let ga = hadamard(g, self.value(*b));
                let gb = hadamard(g, self.value(*a));
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddRow(x, row) => {
                let n = g.cols();
                let mut gr = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (o, v) in gr.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                let shape = self.value(*row).shape().to_vec();
                vec![(*x, g.clone()), (*row, Tensor::new(shape, gr).expect("row"))]
            }
            Op::Scale(x, s) => vec![(*x, g.map(|v| v * s))],
            Op::Sum(x) => vec![(*x, Tensor::full(self.value(*x).shape(), g.item()))],
            Op::Transpose(x) => vec![(*x, g.transpose())],
            Op::Gelu(x) => {
                let bump = match self.fault {
                    Some(GradFault::GeluDerivative) => 1.01,
                    None => 1.0,
                };
                let tx = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, xv)| gv * gelu_derivative(*xv) * bump)
                    .collect();
                vec![(*x, Tensor::new(tx.shape().to_vec(), data).expect("gelu"))]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = g.cols();
                let gv = self.value(*gain).data();
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = Tensor::zeros(g.shape());
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                        let dxh = gr[j] * gv[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xr[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    let out = &mut dx.data_mut()[r * d..(r + 1) * d];
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        out[j] = rs * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
                    }
                }
                let gshape = self.value(*gain).shape().to_vec();
                let bshape = self.value(*bias).shape().to_vec();
                vec![
                    (*x, dx),
                    (*gain, Tensor::new(gshape, dgain).expect("gain")),
                    (*bias, Tensor::new(bshape, dbias).expect("bias")),
                ]
            }
            Op::SoftmaxMasked(x) => {
                let y = &node.value;
                let s = y.cols();
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (k, o) in dx.data_mut()[r * s..(r + 1) * s].iter_mut().enumerate() {
                        *o = yr[k] * (gr[k] - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.item() / targets.len() as f64;
                let v = probs.cols();
                let mut dx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    dx.data_mut()[r * v + t] -= 1.0;
                }
                for o in dx.data_mut() {
                    *o *= scale;
                }
                vec![(*logits, dx)]
            }
            Op::GatherRows(x, idx) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut dx = Tensor::zeros(tx.shape());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, v) in dx.data_mut()[src * c..(src + 1) * c].iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                vec![(*x, dx)]
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let tp = self.value(p);
                        let n = tp.len();
                        let slice = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        debug_assert_eq!(tp.cols(), c);
                        (p, Tensor::new(tp.shape().to_vec(), slice).expect("concat_rows"))
                    })
                    .collect()
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (c, len) = (tx.cols(), g.cols());
                let mut dx = Tensor::zeros(tx.shape());
                for r in 0..tx.rows() {
                    dx.data_mut()[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                vec![(*x, dx)]
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let tp = self.value(p);
                        let w = tp.cols();
                        let mut data = Vec::with_capacity(tp.len());
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        (p, Tensor::new(tp.shape().to_vec(), data).expect("concat_cols"))
                    })
                    .collect()
            }
            Op::RowCosineDistance(p, t) => {
                let (tp, tt) = (self.value(*p), self.value(*t));
                let d = tp.cols();
                let mut dp = Tensor::zeros(tp.shape());
                let mut dt = Tensor::zeros(tt.shape());
                for r in 0..tp.rows() {
                    let (a, b) = (tp.row(r), tt.row(r));
                    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let gr = g.data()[r];
                    let inv = 1.0 / (na * nb);
                    for j in 0..d {
                        let da = -(b[j] * inv - dot * a[j] * inv / (na * na));
                        let db = -(a[j] * inv - dot * b[j] * inv / (nb * nb));
                        dp.data_mut()[r * d + j] = gr * da;
                        dt.data_mut()[r * d + j] = gr * db;
                    }
                }
                vec![(*p, dp), (*t, dt)]
            }
            Op::RowSmoothL1(p, t) => {
                let (tp, tt) = (self.value(*p), self.value(*t));
                let d = tp.cols();
                let mut dp = Tensor::zeros(tp.shape());
                for r in 0..tp.rows() {
                    let gr = g.data()[r] / d as f64;
                    for j in 0..d {
                        let e = tp.at(r, j) - tt.at(r, j);
                        let de = if e.abs() < 1.0 { e } else { e.signum() };
                        dp.data_mut()[r * d + j] = gr * de;
                    }
                }
                let dt = dp.map(|v| -v);
                vec![(*p, dp), (*t, dt)]
            }
        }
    }
}

fn smooth_l1_elem(e: f64) -> f64 {
    if e.abs() < 1.0 {
        0.5 * e * e
    } else {
        e.abs() - 0.5
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}
