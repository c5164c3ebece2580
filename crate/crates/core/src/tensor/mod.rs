//! Dense tensors and a reverse-mode differentiation tape.

mod adam;
mod apply;
mod gemm;
mod gradcheck;
mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub use adam::{Adam, AdamState};
pub use apply::{Attr, Attrs};
pub use gradcheck::{gradient_check, gradient_check_sampled};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("primitive `{op}`: bad or missing attribute `{name}`")]
    BadAttribute { op: String, name: String },
}
