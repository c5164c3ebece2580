//! Parameter storage and the layers the networks are built from.

mod layers;
mod store;

pub use layers::{BatchNorm, BiGru, Conv1d, ConvTranspose1d, Embedding, Gru, Linear};
pub use store::{Bound, Ctx, ParamId, ParamStore};
