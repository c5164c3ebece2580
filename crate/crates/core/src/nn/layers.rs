use std::rc::Rc;

use rand::Rng;

use super::{Ctx, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};

type Result<T> = std::result::Result<T, TensorError>;

fn fan_in_uniform<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

/// `y = x W + b` on row vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.w"), fan_in_uniform(vec![inputs, outputs], inputs, rng), true);
        let b = bias.then(|| store.add(format!("{name}.b"), fan_in_uniform(vec![outputs], inputs, rng), true));
        Self { w, b, inputs, outputs }
    }

    pub fn forward(&self, ctx: &Ctx, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, ctx.var(self.w))?;
        match self.b {
            Some(b) => tape.add_bias(y, ctx.var(b)),
            None => Ok(y),
        }
    }
}

/// 1-D convolution over `[B, C, T]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub kernel: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan = c_in * kernel;
        let w = store.add(format!("{name}.w"), fan_in_uniform(vec![c_out, c_in, kernel], fan, rng), true);
        let b = Some(store.add(format!("{name}.b"), fan_in_uniform(vec![c_out], fan, rng), true));
        Self { w, b, stride, pad, kernel }
    }

    pub fn out_len(&self, t: usize) -> usize {
        (t + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, ctx: &Ctx, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.conv1d(x, ctx.var(self.w), self.b.map(|b| ctx.var(b)), self.stride, self.pad, 1)
    }
}

/// Transposed 1-D convolution over `[B, C, T]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose1d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, rng: &mut R) -> Self {
        let fan = c_out * kernel;
        let w = store.add(format!("{name}.w"), fan_in_uniform(vec![c_in, c_out, kernel], fan, rng), true);
        let b = store.add(format!("{name}.b"), fan_in_uniform(vec![c_out], fan, rng), true);
        Self { w, b, stride: 1, pad: 0 }
    }

    pub fn forward(&self, ctx: &Ctx, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.conv_transpose1d(x, ctx.var(self.w), Some(ctx.var(self.b)), self.stride, self.pad)
    }
}

/// Batch norm with frozen statistics over channel axis 1.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]), true),
            mean: store.add(format!("{name}.running_mean"), Tensor::zeros(vec![channels]), false),
            var: store.add(format!("{name}.running_var"), Tensor::full(vec![channels], 1.0), false),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, ctx: &Ctx, tape: &mut Tape, x: Var) -> Result<Var> {
        let (mean, var) = if ctx.is_calibrating() {
            let (m, v) = channel_stats(tape.value(x));
            ctx.record(self.mean, m.clone());
            ctx.record(self.var, v.clone());
            (m, v)
        } else {
            (tape.value(ctx.var(self.mean)).data().to_vec(), tape.value(ctx.var(self.var)).data().to_vec())
        };
        tape.batch_norm(x, ctx.var(self.gamma), ctx.var(self.beta), &mean, &var, self.eps)
    }
}

/// Per-channel mean and population variance over every axis except 1.
fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    let count = (x.len() / c).max(1) as f64;
    let mut mean = vec![0.0; c];
    for (i, v) in x.data().iter().enumerate() {
        mean[(i / inner) % c] += v;
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for (i, v) in x.data().iter().enumerate() {
        let ch = (i / inner) % c;
        var[ch] += (v - mean[ch]).powi(2);
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// Lookup table; row `vocab` of a table built with `oov = true` is the
/// out-of-vocabulary row.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.add(format!("{name}.table"), Tensor::randn(vec![rows, dim], 1.0, rng), true);
        Self { table, rows, dim }
    }

    /// `[ids.len(), dim]`; callers map unknown ids before calling.
    pub fn forward(&self, ctx: &Ctx, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        let index: Rc<[usize]> = ids.iter().flat_map(|&i| (0..self.dim).map(move |k| i * self.dim + k)).collect();
        tape.gather(ctx.var(self.table), index, &[ids.len(), self.dim])
    }
}

/// Single-direction GRU over time-major rows `[T * B, in]`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_x: ParamId,
    pub b_x: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_x: store.add(format!("{name}.w_x"), fan_in_uniform(vec![inputs, 3 * hidden], hidden, rng), true),
            b_x: store.add(format!("{name}.b_x"), fan_in_uniform(vec![3 * hidden], hidden, rng), true),
            w_h: store.add(format!("{name}.w_h"), fan_in_uniform(vec![hidden, 3 * hidden], hidden, rng), true),
            b_h: store.add(format!("{name}.b_h"), fan_in_uniform(vec![3 * hidden], hidden, rng), true),
            hidden,
        }
    }

    /// Hidden states per time step, in time order, each `[B, H]`.
    pub fn run(&self, ctx: &Ctx, tape: &mut Tape, x: Var, steps: usize, batch: usize, reverse: bool) -> Result<Vec<Var>> {
        let gx_all = tape.matmul(x, ctx.var(self.w_x))?;
        let gx_all = tape.add_bias(gx_all, ctx.var(self.b_x))?;
        let mut h = tape.constant(Tensor::zeros(vec![batch, self.hidden]));
        let mut out = vec![h; steps];
        let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for t in order {
            let gx = tape.slice(gx_all, 0, t * batch, batch)?;
            h = tape.gru_cell(gx, h, ctx.var(self.w_h), ctx.var(self.b_h))?;
            out[t] = h;
        }
        Ok(out)
    }
}

/// Two independent GRU passes over the sequence, one per direction.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub fwd: Gru,
    pub bwd: Gru,
}

impl BiGru {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fwd: Gru::new(store, &format!("{name}.fwd"), inputs, hidden, rng),
            bwd: Gru::new(store, &format!("{name}.bwd"), inputs, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    /// Forward and backward states, each `[T * B, H]` time-major.
    pub fn run(&self, ctx: &Ctx, tape: &mut Tape, x: Var, steps: usize, batch: usize) -> Result<(Var, Var)> {
        let f = self.fwd.run(ctx, tape, x, steps, batch, false)?;
        let b = self.bwd.run(ctx, tape, x, steps, batch, true)?;
        Ok((tape.concat(&f, 0)?, tape.concat(&b, 0)?))
    }

    /// Directions concatenated: `[T * B, 2H]`.
    pub fn forward_concat(&self, ctx: &Ctx, tape: &mut Tape, x: Var, steps: usize, batch: usize) -> Result<Var> {
        let (f, b) = self.run(ctx, tape, x, steps, batch)?;
        tape.concat(&[f, b], 1)
    }

    /// Directions summed: `[T * B, H]`.
    pub fn forward_sum(&self, ctx: &Ctx, tape: &mut Tape, x: Var, steps: usize, batch: usize) -> Result<Var> {
        let (f, b) = self.run(ctx, tape, x, steps, batch)?;
        tape.add(f, b)
    }
}
