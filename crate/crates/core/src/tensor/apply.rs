use std::collections::BTreeMap;

use super::{Tape, TensorError, Var};

/// Attribute value for [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Attr {
    Int(i64),
    Float(f64),
    Ints(Vec<i64>),
    Floats(Vec<f64>),
}

pub type Attrs = BTreeMap<String, Attr>;

fn bad(op: &str, name: &str) -> TensorError {
    TensorError::BadAttribute { op: op.to_string(), name: name.to_string() }
}

fn int(op: &str, attrs: &Attrs, name: &str, default: Option<i64>) -> Result<usize, TensorError> {
    match attrs.get(name) {
        Some(Attr::Int(v)) if *v >= 0 => Ok(*v as usize),
        None => default.map(|d| d as usize).ok_or_else(|| bad(op, name)),
        _ => Err(bad(op, name)),
    }
}

fn float(op: &str, attrs: &Attrs, name: &str, default: Option<f64>) -> Result<f64, TensorError> {
    match attrs.get(name) {
        Some(Attr::Float(v)) => Ok(*v),
        Some(Attr::Int(v)) => Ok(*v as f64),
        None => default.ok_or_else(|| bad(op, name)),
        _ => Err(bad(op, name)),
    }
}

fn ints(op: &str, attrs: &Attrs, name: &str) -> Result<Vec<usize>, TensorError> {
    match attrs.get(name) {
        Some(Attr::Ints(v)) if v.iter().all(|x| *x >= 0) => Ok(v.iter().map(|x| *x as usize).collect()),
        _ => Err(bad(op, name)),
    }
}

fn floats(op: &str, attrs: &Attrs, name: &str) -> Result<Vec<f64>, TensorError> {
    match attrs.get(name) {
        Some(Attr::Floats(v)) => Ok(v.clone()),
        _ => Err(bad(op, name)),
    }
}

impl Tape {
    /// Applies a primitive by name. Useful for table-driven callers; typed
    /// methods on [`Tape`] are the primary interface.
    pub fn apply(&mut self, op: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var, TensorError> {
        let arity = |n: usize| -> Result<(), TensorError> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(TensorError::ShapeMismatch {
                    op: "apply",
                    detail: format!("`{}` takes {} inputs, got {}", op, n, inputs.len()),
                })
            }
        };
        let x = |i: usize| inputs[i];
        match op {
            "add" | "sub" | "mul" | "div" | "matmul" | "add_bias" | "mul_rows" | "cosine_similarity" => {
                arity(2)?;
                match op {
                    "add" => self.add(x(0), x(1)),
                    "sub" => self.sub(x(0), x(1)),
                    "mul" => self.mul(x(0), x(1)),
                    "div" => self.div(x(0), x(1)),
                    "matmul" => self.matmul(x(0), x(1)),
                    "add_bias" => self.add_bias(x(0), x(1)),
                    "mul_rows" => self.mul_rows(x(0), x(1)),
                    _ => self.cosine_similarity(x(0), x(1)),
                }
            }
            "softmax" | "logsumexp" | "sigmoid" | "tanh" | "relu" | "exp" | "log" | "square" | "abs"
            | "sum" | "mean" | "sum_rows" | "l1_norm" | "l2_norm" | "normalize" => {
                arity(1)?;
                Ok(match op {
                    "softmax" => self.softmax(x(0)),
                    "logsumexp" => self.logsumexp(x(0)),
                    "sigmoid" => self.sigmoid(x(0)),
                    "tanh" => self.tanh(x(0)),
                    "relu" => self.relu(x(0)),
                    "exp" => self.exp(x(0)),
                    "log" => self.log(x(0)),
                    "square" => self.square(x(0)),
                    "abs" => self.abs(x(0)),
                    "sum" => self.sum(x(0)),
                    "mean" => self.mean(x(0)),
                    "sum_rows" => self.sum_rows(x(0)),
                    "l1_norm" => self.l1_norm(x(0)),
                    "l2_norm" => self.l2_norm(x(0)),
                    _ => self.normalize_rows(x(0)),
                })
            }
            "leaky_relu" => {
                arity(1)?;
                Ok(self.leaky_relu(x(0), float(op, attrs, "slope", Some(0.01))?))
            }
            "scale" => {
                arity(1)?;
                Ok(self.scale(x(0), float(op, attrs, "value", None)?))
            }
            "add_scalar" => {
                arity(1)?;
                Ok(self.add_scalar(x(0), float(op, attrs, "value", None)?))
            }
            "huber" => {
                arity(1)?;
                Ok(self.huber(x(0), float(op, attrs, "delta", Some(1.0))?))
            }
            "min_const" => {
                arity(1)?;
                Ok(self.min_const(x(0), float(op, attrs, "value", None)?))
            }
            "clamp" => {
                arity(1)?;
                Ok(self.clamp(x(0), float(op, attrs, "lo", None)?, float(op, attrs, "hi", None)?))
            }
            "acos" => {
                arity(1)?;
                Ok(self.acos(x(0), float(op, attrs, "margin", Some(1e-7))?))
            }
            "concat" => self.concat(inputs, int(op, attrs, "axis", Some(0))?),
            "slice" => {
                arity(1)?;
                self.slice(x(0), int(op, attrs, "axis", Some(0))?, int(op, attrs, "start", None)?, int(op, attrs, "len", None)?)
            }
            "reshape" => {
                arity(1)?;
                self.reshape(x(0), &ints(op, attrs, "shape")?)
            }
            "permute" => {
                arity(1)?;
                self.permute(x(0), &ints(op, attrs, "perm")?)
            }
            "conv1d" | "conv_transpose1d" => {
                let bias = match inputs.len() {
                    2 => None,
                    3 => Some(x(2)),
                    _ => return arity(2).map(|_| unreachable!()),
                };
                let stride = int(op, attrs, "stride", Some(1))?;
                let pad = int(op, attrs, "padding", Some(0))?;
                if op == "conv1d" {
                    self.conv1d(x(0), x(1), bias, stride, pad, int(op, attrs, "dilation", Some(1))?)
                } else {
                    self.conv_transpose1d(x(0), x(1), bias, stride, pad)
                }
            }
            "batch_norm" => {
                arity(3)?;
                let mean = floats(op, attrs, "mean")?;
                let var = floats(op, attrs, "var")?;
                self.batch_norm(x(0), x(1), x(2), &mean, &var, float(op, attrs, "eps", Some(1e-5))?)
            }
            "gru_cell" => {
                arity(4)?;
                self.gru_cell(x(0), x(1), x(2), x(3))
            }
            other => Err(TensorError::UnknownPrimitive(other.to_string())),
        }
    }
}
