use std::rc::Rc;

use super::gemm::gemm;
use super::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Tape`].
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
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddBias(usize, usize),
    MulRows(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Reshape(usize),
    Gather { input: usize, index: Rc<[usize]> },
    Softmax(usize),
    LogSumExp { input: usize, probs: Vec<f64> },
    Sigmoid(usize),
    Tanh(usize),
    LeakyRelu(usize, f64),
    Exp(usize),
    Log(usize),
    Square(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    L1Rows(usize),
    L2Rows(usize),
    NormalizeRows(usize),
    Cosine(usize, usize),
    Huber(usize, f64),
    MinConst(usize, f64),
    Clamp(usize, f64, f64),
    Acos(usize, f64),
    Conv1d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom, cols: Vec<f64> },
    ConvT1d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    BatchNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, inv_std: Vec<f64> },
    GruCell { gx: usize, h: usize, w: usize, b: usize, cache: Box<GruCache> },
}

#[derive(Debug)]
struct GruCache {
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    ghn: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    t_in: usize,
    t_out: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications in order so that [`Tape::backward`] can
/// replay them in reverse.
///
/// A tape is single-owner. Distinct tapes are independent and may be used on
/// different threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `cols[c, k, t] = src[c, t * stride - pad + k * dil]` (zero outside).
#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f64],
    channels: usize,
    t_src: usize,
    kernel: usize,
    t_cols: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    cols: &mut [f64],
) {
    for c in 0..channels {
        let row = &src[c * t_src..(c + 1) * t_src];
        for k in 0..kernel {
            let dst = &mut cols[(c * kernel + k) * t_cols..(c * kernel + k + 1) * t_cols];
            for (t, d) in dst.iter_mut().enumerate() {
                let i = (t * stride + k * dil) as isize - pad as isize;
                *d = if i >= 0 && (i as usize) < t_src { row[i as usize] } else { 0.0 };
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dst`.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    channels: usize,
    t_dst: usize,
    kernel: usize,
    t_cols: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    dst: &mut [f64],
) {
    for c in 0..channels {
        let row = &mut dst[c * t_dst..(c + 1) * t_dst];
        for k in 0..kernel {
            let src = &cols[(c * kernel + k) * t_cols..(c * kernel + k + 1) * t_cols];
            for (t, v) in src.iter().enumerate() {
                let i = (t * stride + k * dil) as isize - pad as isize;
                if i >= 0 && (i as usize) < t_dst {
                    row[i as usize] += v;
                }
            }
        }
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
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

    /// A trainable leaf: gradients flow into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf: no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
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

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a.0);
        self.push(value, op, rg)
    }

    // ---- elementwise binary -------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::Mul(a.0, b.0), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.zip_with(a, b, |x, y| x / y);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::Div(a.0, b.0), rg))
    }

    /// Adds `b` to every trailing block of `a`; `a.shape` must end with `b.shape`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add_bias", format!("{:?} + {:?}", sa, sb)));
        }
        let bias = self.value(b).data();
        let n = bias.len().max(1);
        let va = self.value(a);
        let data = va.data().iter().enumerate().map(|(i, &x)| x + bias[i % n]).collect();
        let v = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::AddBias(a.0, b.0), rg))
    }

    /// Scales each row (last axis) of `x` by the matching entry of `s`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let rows = self.value(x).len() / d.max(1);
        if self.value(s).len() != rows {
            return Err(mismatch(
                "mul_rows",
                format!("{:?} rows vs scale {:?}", self.shape(x), self.shape(s)),
            ));
        }
        let sv = self.value(s).data();
        let vx = self.value(x);
        let data = vx.data().iter().enumerate().map(|(i, &v)| v * sv[i / d]).collect();
        let v = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(x.0) || self.rg(s.0);
        Ok(self.push(v, Op::MulRows(x.0, s.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a.0, b.0), rg))
    }

    // ---- structural --------------------------------------------------------

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| mismatch("concat", "no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(mismatch("concat", format!("axis {} for shape {:?}", axis, base)));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(mismatch("concat", format!("{:?} vs {:?} on axis {}", s, base, axis)));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|p| self.rg(p.0));
        let op = Op::Concat { inputs: parts.iter().map(|p| p.0).collect(), axis };
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(mismatch(
                "slice",
                format!("[{}..{}] on axis {} of {:?}", start, start + len, axis, shape),
            ));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Slice { input: x.0, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x.0);
        Ok(self.push(v, Op::Reshape(x.0), rg))
    }

    /// `out[k] = x[index[k]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != index.len() || index.iter().any(|&i| i >= n) {
            return Err(mismatch(
                "gather",
                format!("{} indices into {:?} as {:?}", index.len(), self.shape(x), shape),
            ));
        }
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Gather { input: x.0, index }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(mismatch("permute", format!("perm {:?} for {:?}", perm, shape)));
        }
        let rank = shape.len();
        let mut strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let total: usize = out_shape.iter().product();
        let mut index = Vec::with_capacity(total);
        let mut coord = vec![0usize; rank];
        for _ in 0..total {
            index.push(coord.iter().zip(perm).map(|(&c, &p)| c * strides[p]).sum());
            for ax in (0..rank).rev() {
                coord[ax] += 1;
                if coord[ax] < out_shape[ax] {
                    break;
                }
                coord[ax] = 0;
            }
        }
        self.gather(x, index.into(), &out_shape)
    }

    // ---- row reductions & activations -------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let v = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(x.0);
        self.push(v, Op::Softmax(x.0), rg)
    }

    /// `log(sum(exp(row)))` over the last axis; the axis is removed.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut probs = vx.data().to_vec();
        let mut out = Vec::with_capacity(probs.len() / d.max(1));
        for row in probs.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
            out.push(m + s.ln());
        }
        let shape = vx.shape()[..vx.rank().saturating_sub(1)].to_vec();
        let rg = self.rg(x.0);
        self.push(Tensor::from_parts(shape, out), Op::LogSumExp { input: x.0, probs }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x.0, slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x.0))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x.0))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x.0))
    }

    /// Elementwise Huber penalty with transition point `delta`.
    pub fn huber(&mut self, x: Var, delta: f64) -> Var {
        self.unary(
            x,
            move |v| {
                let a = v.abs();
                if a <= delta {
                    0.5 * v * v
                } else {
                    delta * (a - 0.5 * delta)
                }
            },
            Op::Huber(x.0, delta),
        )
    }

    pub fn min_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v.min(c), Op::MinConst(x.0, c))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, move |v| v.clamp(lo, hi), Op::Clamp(x.0, lo, hi))
    }

    /// Arc-cosine with the argument clamped to `[-1 + margin, 1 - margin]`.
    pub fn acos(&mut self, x: Var, margin: f64) -> Var {
        let lim = 1.0 - margin;
        self.unary(x, move |v| v.clamp(-lim, lim).acos(), Op::Acos(x.0, margin))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Mean(x.0), rg)
    }

    fn row_reduce(&mut self, x: Var, f: impl Fn(&[f64]) -> f64, op: Op) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let out: Vec<f64> = vx.data().chunks(d.max(1)).map(f).collect();
        let shape = vx.shape()[..vx.rank().saturating_sub(1)].to_vec();
        let rg = self.rg(x.0);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    /// Sum over the last axis.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        self.row_reduce(x, |r| r.iter().sum(), Op::SumRows(x.0))
    }

    /// L1 norm over the last axis.
    pub fn l1_norm(&mut self, x: Var) -> Var {
        self.row_reduce(x, |r| r.iter().map(|v| v.abs()).sum(), Op::L1Rows(x.0))
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        self.row_reduce(x, |r| r.iter().map(|v| v * v).sum::<f64>().sqrt(), Op::L2Rows(x.0))
    }

    /// Scales each row to unit Euclidean length. Zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let v = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(x.0);
        self.push(v, Op::NormalizeRows(x.0), rg)
    }

    /// Row-wise cosine similarity between two equally shaped tensors.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let d = self.value(a).last_dim();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(d)
            .zip(self.value(b).data().chunks(d))
            .map(|(x, y)| {
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                dot / (nx * ny)
            })
            .collect();
        let sa = self.shape(a);
        let shape = sa[..sa.len().saturating_sub(1)].to_vec();
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Cosine(a.0, b.0), rg))
    }

    // ---- layers ----------------------------------------------------------------

    /// 1-D convolution. `x: [B, Cin, T]`, `w: [Cout, Cin, K]`, optional `b: [Cout]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || stride == 0 || dilation == 0 {
            return Err(mismatch("conv1d", format!("x {:?} w {:?}", sx, sw)));
        }
        let (batch, c_in, t_in) = (sx[0], sx[1], sx[2]);
        let (c_out, kernel) = (sw[0], sw[2]);
        let span = dilation * (kernel - 1) + 1;
        if t_in + 2 * pad < span {
            return Err(mismatch("conv1d", format!("length {} shorter than kernel span {}", t_in, span)));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(mismatch("conv1d", format!("bias {:?} for {} channels", self.shape(b), c_out)));
            }
        }
        let t_out = (t_in + 2 * pad - span) / stride + 1;
        let geom = ConvGeom { batch, c_in, c_out, kernel, t_in, t_out, stride, pad, dilation };
        let ck = c_in * kernel;
        let mut cols = vec![0.0; batch * ck * t_out];
        let mut out = vec![0.0; batch * c_out * t_out];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for bi in 0..batch {
            let col = &mut cols[bi * ck * t_out..(bi + 1) * ck * t_out];
            im2col(&xv[bi * c_in * t_in..(bi + 1) * c_in * t_in], c_in, t_in, kernel, t_out, stride, pad, dilation, col);
            gemm(c_out, ck, t_out, wv, false, col, false, &mut out[bi * c_out * t_out..(bi + 1) * c_out * t_out], 0.0);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (i, row) in out.chunks_mut(t_out).enumerate() {
                let c = i % c_out;
                row.iter_mut().for_each(|v| *v += bv[c]);
            }
        }
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        let op = Op::Conv1d { x: x.0, w: w.0, b: b.map(|b| b.0), geom, cols: if rg { cols } else { Vec::new() } };
        Ok(self.push(Tensor::from_parts(vec![batch, c_out, t_out], out), op, rg))
    }

    /// Transposed 1-D convolution. `x: [B, Cin, T]`, `w: [Cin, Cout, K]`;
    /// output length `(T - 1) * stride - 2 * pad + K`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[0] || stride == 0 || sx[2] == 0 {
            return Err(mismatch("conv_transpose1d", format!("x {:?} w {:?}", sx, sw)));
        }
        let (batch, c_in, t_in) = (sx[0], sx[1], sx[2]);
        let (c_out, kernel) = (sw[1], sw[2]);
        let full = (t_in - 1) * stride + kernel;
        if full <= 2 * pad {
            return Err(mismatch("conv_transpose1d", format!("padding {} too large", pad)));
        }
        let t_out = full - 2 * pad;
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(mismatch("conv_transpose1d", format!("bias {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom { batch, c_in, c_out, kernel, t_in, t_out, stride, pad, dilation: 1 };
        let ck = c_out * kernel;
        let mut cols = vec![0.0; ck * t_in];
        let mut out = vec![0.0; batch * c_out * t_out];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for bi in 0..batch {
            gemm(ck, c_in, t_in, wv, true, &xv[bi * c_in * t_in..(bi + 1) * c_in * t_in], false, &mut cols, 0.0);
            col2im(&cols, c_out, t_out, kernel, t_in, stride, pad, 1, &mut out[bi * c_out * t_out..(bi + 1) * c_out * t_out]);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (i, row) in out.chunks_mut(t_out).enumerate() {
                row.iter_mut().for_each(|v| *v += bv[i % c_out]);
            }
        }
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        let op = Op::ConvT1d { x: x.0, w: w.0, b: b.map(|b| b.0), geom };
        Ok(self.push(Tensor::from_parts(vec![batch, c_out, t_out], out), op, rg))
    }

    /// Batch norm in its affine inference form, channel axis 1:
    /// `y = (x - mean) / sqrt(var + eps) * gamma + beta` with fixed statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(mismatch("batch_norm", format!("input {:?} has no channel axis", sx)));
        }
        let c = sx[1];
        if self.value(gamma).len() != c || self.value(beta).len() != c || mean.len() != c || var.len() != c {
            return Err(mismatch("batch_norm", format!("{} channels vs parameter sizes", c)));
        }
        let inner: usize = sx[2..].iter().product();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / inner) % c;
                (v - mean[ch]) * inv_std[ch] * g[ch] + bt[ch]
            })
            .collect();
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        let op = Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, mean: mean.to_vec(), inv_std };
        Ok(self.push(Tensor::from_parts(sx, data), op, rg))
    }

    /// One GRU step from a precomputed input projection.
    ///
    /// `gx = x W_x + b_x` with shape `[B, 3H]` (gate order reset, update,
    /// candidate), `h: [B, H]`, `w: [H, 3H]`, `b: [3H]`.
    pub fn gru_cell(&mut self, gx: Var, h: Var, w: Var, b: Var) -> Result<Var> {
        let (sg, sh, sw) = (self.shape(gx).to_vec(), self.shape(h).to_vec(), self.shape(w).to_vec());
        if sh.len() != 2 || sg.len() != 2 || sw.len() != 2 {
            return Err(mismatch("gru_cell", format!("gx {:?} h {:?} w {:?}", sg, sh, sw)));
        }
        let (batch, hid) = (sh[0], sh[1]);
        if sg != [batch, 3 * hid] || sw != [hid, 3 * hid] || self.shape(b) != [3 * hid] {
            return Err(mismatch("gru_cell", format!("gx {:?} h {:?} w {:?} b {:?}", sg, sh, sw, self.shape(b))));
        }
        let mut gh = vec![0.0; batch * 3 * hid];
        gemm(batch, hid, 3 * hid, self.value(h).data(), false, self.value(w).data(), false, &mut gh, 0.0);
        let bv = self.value(b).data();
        let gxv = self.value(gx).data();
        let hv = self.value(h).data();
        let n_el = batch * hid;
        let mut cache = GruCache { r: vec![0.0; n_el], z: vec![0.0; n_el], n: vec![0.0; n_el], ghn: vec![0.0; n_el] };
        let mut out = vec![0.0; n_el];
        for bi in 0..batch {
            let row = bi * 3 * hid;
            for j in 0..hid {
                let r = sigmoid(gxv[row + j] + gh[row + j] + bv[j]);
                let z = sigmoid(gxv[row + hid + j] + gh[row + hid + j] + bv[hid + j]);
                let ghn = gh[row + 2 * hid + j] + bv[2 * hid + j];
                let n = (gxv[row + 2 * hid + j] + r * ghn).tanh();
                let k = bi * hid + j;
                out[k] = (1.0 - z) * n + z * hv[k];
                cache.r[k] = r;
                cache.z[k] = z;
                cache.n[k] = n;
                cache.ghn[k] = ghn;
            }
        }
        let rg = self.rg(gx.0) || self.rg(h.0) || self.rg(w.0) || self.rg(b.0);
        let op = Op::GruCell { gx: gx.0, h: h.0, w: w.0, b: b.0, cache: Box::new(cache) };
        Ok(self.push(Tensor::from_parts(vec![batch, hid], out), op, rg))
    }

    // ---- backward ----------------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Gradients accumulate over fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, shapes: self.shapes() });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads, shapes: self.shapes() })
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        self.nodes.iter().map(|n| n.value.shape().to_vec()).collect()
    }

    fn acc(&self, grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor>], idx: usize, data: Vec<f64>) {
        let shape = self.nodes[idx].value.shape().to_vec();
        self.acc(grads, idx, Tensor::from_parts(shape, data));
    }

    /// Adds into the gradient buffer of `idx` in place, creating it if needed.
    fn acc_with(&self, grads: &mut [Option<Tensor>], idx: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let slot = grads[idx].get_or_insert_with(|| Tensor::zeros(self.nodes[idx].value.shape().to_vec()));
        f(slot.data_mut());
    }

    fn val(&self, i: usize) -> &[f64] {
        self.nodes[i].value.data()
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = self.val(i);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*b) {
                    self.acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = gd.iter().zip(self.val(*b)).map(|(g, y)| g * y).collect();
                    self.acc_data(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(self.val(*a)).map(|(g, x)| g * x).collect();
                    self.acc_data(grads, *b, d);
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.rg(*a) {
                    let d = gd.iter().zip(bv).map(|(g, y)| g / y).collect();
                    self.acc_data(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(av.iter().zip(bv)).map(|(g, (x, y))| -g * x / (y * y)).collect();
                    self.acc_data(grads, *b, d);
                }
            }
            Op::AddBias(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*b) {
                    let n = self.nodes[*b].value.len().max(1);
                    let mut d = vec![0.0; n];
                    for (k, v) in gd.iter().enumerate() {
                        d[k % n] += v;
                    }
                    self.acc_data(grads, *b, d);
                }
            }
            Op::MulRows(x, s) => {
                let dim = self.nodes[*x].value.last_dim();
                let sv = self.val(*s);
                if self.rg(*x) {
                    let d = gd.iter().enumerate().map(|(k, g)| g * sv[k / dim]).collect();
                    self.acc_data(grads, *x, d);
                }
                if self.rg(*s) {
                    let d = gd.chunks(dim).zip(self.val(*x).chunks(dim)).map(|(g, x)| g.iter().zip(x).map(|(p, q)| p * q).sum()).collect();
                    self.acc_data(grads, *s, d);
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, self.val(*b), true, &mut d, 0.0);
                    self.acc_data(grads, *a, d);
                }
                if self.rg(*b) {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, self.val(*a), true, gd, false, &mut d, 0.0);
                    self.acc_data(grads, *b, d);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = self.nodes[i].value.shape();
                let (outer, inner) = outer_inner(shape, *axis);
                let total = shape[*axis];
                let mut offset = 0;
                for &p in inputs {
                    let len = self.nodes[p].value.shape()[*axis];
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        self.acc_data(grads, p, d);
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = self.nodes[*input].value.shape();
                let (outer, inner) = outer_inner(shape, *axis);
                let len = self.nodes[i].value.shape()[*axis];
                let axis_len = shape[*axis];
                self.acc_with(grads, *input, |d| {
                    for o in 0..outer {
                        let base = (o * axis_len + start) * inner;
                        let src = &gd[o * len * inner..(o + 1) * len * inner];
                        d[base..base + len * inner].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Reshape(a) => self.acc_data(grads, *a, gd.to_vec()),
            Op::Gather { input, index } => {
                self.acc_with(grads, *input, |d| {
                    for (k, &src) in index.iter().enumerate() {
                        d[src] += gd[k];
                    }
                });
            }
            Op::Softmax(a) => {
                let dim = self.nodes[i].value.last_dim();
                let mut d = vec![0.0; gd.len()];
                for ((dr, gr), yr) in d.chunks_mut(dim).zip(gd.chunks(dim)).zip(out.chunks(dim)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.acc_data(grads, *a, d);
            }
            Op::LogSumExp { input, probs } => {
                let dim = self.nodes[*input].value.last_dim();
                let d = probs.iter().enumerate().map(|(k, p)| p * gd[k / dim]).collect();
                self.acc_data(grads, *input, d);
            }
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.acc_data(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = gd.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.acc_data(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let d = gd.iter().zip(self.val(*a)).map(|(g, x)| if *x > 0.0 { *g } else { g * slope }).collect();
                self.acc_data(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(out).map(|(g, y)| g * y).collect();
                self.acc_data(grads, *a, d);
            }
            Op::Log(a) => {
                let d = gd.iter().zip(self.val(*a)).map(|(g, x)| g / x).collect();
                self.acc_data(grads, *a, d);
            }
            Op::Square(a) => {
                let d = gd.iter().zip(self.val(*a)).map(|(g, x)| 2.0 * g * x).collect();
                self.acc_data(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = gd.iter().zip(self.val(*a)).map(|(g, x)| g * x.signum() * (*x != 0.0) as u8 as f64).collect();
                self.acc_data(grads, *a, d);
            }
            Op::Huber(a, delta) => {
                let d = gd.iter().zip(self.val(*a)).map(|(g, x)| if x.abs() <= *delta { g * x } else { g * delta * x.signum() }).collect();
                self.acc_data(grads, *a, d);
            }
            Op::MinConst(a, c) => {
                let d = gd.iter().zip(self.val(*a)).map(|(g, x)| if x < c { *g } else { 0.0 }).collect();
                self.acc_data(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = gd.iter().zip(self.val(*a)).map(|(g, x)| if x >= lo && x <= hi { *g } else { 0.0 }).collect();
                self.acc_data(grads, *a, d);
            }
            Op::Acos(a, margin) => {
                let lim = 1.0 - margin;
                let d = gd
                    .iter()
                    .zip(self.val(*a))
                    .map(|(g, x)| if x.abs() <= lim { -g / (1.0 - x * x).sqrt() } else { 0.0 })
                    .collect();
                self.acc_data(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.len();
                self.acc_data(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len();
                self.acc_data(grads, *a, vec![gd[0] / n as f64; n]);
            }
            Op::SumRows(a) => {
                let dim = self.nodes[*a].value.last_dim();
                let n = self.nodes[*a].value.len();
                self.acc_data(grads, *a, (0..n).map(|k| gd[k / dim]).collect());
            }
            Op::L1Rows(a) => {
                let dim = self.nodes[*a].value.last_dim();
                let d = self.val(*a).iter().enumerate().map(|(k, x)| gd[k / dim] * x.signum() * (*x != 0.0) as u8 as f64).collect();
                self.acc_data(grads, *a, d);
            }
            Op::L2Rows(a) => {
                let dim = self.nodes[*a].value.last_dim();
                let d = self
                    .val(*a)
                    .iter()
                    .enumerate()
                    .map(|(k, x)| if out[k / dim] > 0.0 { gd[k / dim] * x / out[k / dim] } else { 0.0 })
                    .collect();
                self.acc_data(grads, *a, d);
            }
            Op::NormalizeRows(a) => {
                let dim = self.nodes[i].value.last_dim();
                let xv = self.val(*a);
                let mut d = vec![0.0; gd.len()];
                for r in 0..gd.len() / dim {
                    let xr = &xv[r * dim..(r + 1) * dim];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let yr = &out[r * dim..(r + 1) * dim];
                    let gr = &gd[r * dim..(r + 1) * dim];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for k in 0..dim {
                        d[r * dim + k] = (gr[k] - yr[k] * dot) / norm;
                    }
                }
                self.acc_data(grads, *a, d);
            }
            Op::Cosine(a, b) => {
                let dim = self.nodes[*a].value.last_dim();
                let (av, bv) = (self.val(*a), self.val(*b));
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for r in 0..gd.len() {
                    let x = &av[r * dim..(r + 1) * dim];
                    let y = &bv[r * dim..(r + 1) * dim];
                    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let c = out[r];
                    for k in 0..dim {
                        da[r * dim + k] = gd[r] * (y[k] / (nx * ny) - c * x[k] / (nx * nx));
                        db[r * dim + k] = gd[r] * (x[k] / (nx * ny) - c * y[k] / (ny * ny));
                    }
                }
                if self.rg(*a) {
                    self.acc_data(grads, *a, da);
                }
                if self.rg(*b) {
                    self.acc_data(grads, *b, db);
                }
            }
            Op::Conv1d { x, w, b, geom, cols } => self.conv1d_backward(gd, *x, *w, *b, geom, cols, grads),
            Op::ConvT1d { x, w, b, geom } => self.conv_t1d_backward(gd, *x, *w, *b, geom, grads),
            Op::BatchNorm { x, gamma, beta, mean, inv_std } => {
                let c = mean.len();
                let inner: usize = self.nodes[*x].value.shape()[2..].iter().product();
                let gv = self.val(*gamma);
                let xv = self.val(*x);
                if self.rg(*x) {
                    let d = gd.iter().enumerate().map(|(k, g)| g * inv_std[(k / inner) % c] * gv[(k / inner) % c]).collect();
                    self.acc_data(grads, *x, d);
                }
                let mut dg = vec![0.0; c];
                let mut dbt = vec![0.0; c];
                for (k, g) in gd.iter().enumerate() {
                    let ch = (k / inner) % c;
                    dg[ch] += g * (xv[k] - mean[ch]) * inv_std[ch];
                    dbt[ch] += g;
                }
                self.acc_data(grads, *gamma, dg);
                self.acc_data(grads, *beta, dbt);
            }
            Op::GruCell { gx, h, w, b, cache } => self.gru_backward(gd, *gx, *h, *w, *b, cache, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        gd: &[f64],
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: &ConvGeom,
        cols: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let ConvGeom { batch, c_in, c_out, kernel, t_in, t_out, stride, pad, dilation } = *geom;
        let ck = c_in * kernel;
        if self.rg(w) {
            let mut dw = vec![0.0; c_out * ck];
            for bi in 0..batch {
                gemm(c_out, t_out, ck, &gd[bi * c_out * t_out..], false, &cols[bi * ck * t_out..], true, &mut dw, 1.0);
            }
            self.acc_data(grads, w, dw);
        }
        if self.rg(x) {
            let wv = self.val(w);
            let mut dx = vec![0.0; batch * c_in * t_in];
            let mut dcols = vec![0.0; ck * t_out];
            for bi in 0..batch {
                gemm(ck, c_out, t_out, wv, true, &gd[bi * c_out * t_out..], false, &mut dcols, 0.0);
                col2im(&dcols, c_in, t_in, kernel, t_out, stride, pad, dilation, &mut dx[bi * c_in * t_in..(bi + 1) * c_in * t_in]);
            }
            self.acc_data(grads, x, dx);
        }
        if let Some(b) = b {
            let mut db = vec![0.0; c_out];
            for (k, row) in gd.chunks(t_out).enumerate() {
                db[k % c_out] += row.iter().sum::<f64>();
            }
            self.acc_data(grads, b, db);
        }
    }

    fn conv_t1d_backward(
        &self,
        gd: &[f64],
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: &ConvGeom,
        grads: &mut [Option<Tensor>],
    ) {
        let ConvGeom { batch, c_in, c_out, kernel, t_in, t_out, stride, pad, .. } = *geom;
        let ck = c_out * kernel;
        let xv = self.val(x);
        let wv = self.val(w);
        let mut dcols = vec![0.0; ck * t_in];
        let mut dx = vec![0.0; batch * c_in * t_in];
        let mut dw = vec![0.0; c_in * ck];
        for bi in 0..batch {
            im2col(&gd[bi * c_out * t_out..(bi + 1) * c_out * t_out], c_out, t_out, kernel, t_in, stride, pad, 1, &mut dcols);
            if self.rg(x) {
                gemm(c_in, ck, t_in, wv, false, &dcols, false, &mut dx[bi * c_in * t_in..(bi + 1) * c_in * t_in], 0.0);
            }
            if self.rg(w) {
                gemm(c_in, t_in, ck, &xv[bi * c_in * t_in..], false, &dcols, true, &mut dw, 1.0);
            }
        }
        self.acc_data(grads, x, dx);
        self.acc_data(grads, w, dw);
        if let Some(b) = b {
            let mut db = vec![0.0; c_out];
            for (k, row) in gd.chunks(t_out).enumerate() {
                db[k % c_out] += row.iter().sum::<f64>();
            }
            self.acc_data(grads, b, db);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn gru_backward(
        &self,
        gd: &[f64],
        gx: usize,
        h: usize,
        w: usize,
        b: usize,
        cache: &GruCache,
        grads: &mut [Option<Tensor>],
    ) {
        let shape = self.nodes[h].value.shape();
        let (batch, hid) = (shape[0], shape[1]);
        let hv = self.val(h);
        let mut dgx = vec![0.0; batch * 3 * hid];
        let mut dgh = vec![0.0; batch * 3 * hid];
        let mut dh = vec![0.0; batch * hid];
        for bi in 0..batch {
            let row = bi * 3 * hid;
            for j in 0..hid {
                let k = bi * hid + j;
                let (r, z, n, ghn) = (cache.r[k], cache.z[k], cache.n[k], cache.ghn[k]);
                let g = gd[k];
                let dn = g * (1.0 - z);
                let dz = g * (hv[k] - n);
                dh[k] = g * z;
                let dan = dn * (1.0 - n * n);
                let dar = dan * ghn * r * (1.0 - r);
                let daz = dz * z * (1.0 - z);
                dgx[row + j] = dar;
                dgx[row + hid + j] = daz;
                dgx[row + 2 * hid + j] = dan;
                dgh[row + j] = dar;
                dgh[row + hid + j] = daz;
                dgh[row + 2 * hid + j] = dan * r;
            }
        }
        if self.rg(h) {
            gemm(batch, 3 * hid, hid, &dgh, false, self.val(w), true, &mut dh, 1.0);
            self.acc_data(grads, h, dh);
        }
        if self.rg(w) {
            let mut dw = vec![0.0; hid * 3 * hid];
            gemm(hid, batch, 3 * hid, hv, true, &dgh, false, &mut dw, 0.0);
            self.acc_data(grads, w, dw);
        }
        if self.rg(b) {
            let mut db = vec![0.0; 3 * hid];
            for row in dgh.chunks(3 * hid) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            self.acc_data(grads, b, db);
        }
        self.acc_data(grads, gx, dgx);
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}
