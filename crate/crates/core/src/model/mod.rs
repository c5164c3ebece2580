//! Generator, discriminator, batching and checkpoints.

mod audio;
mod batch;
pub mod checkpoint;
mod config;
mod decoder;
mod discriminator;
mod generator;
mod style;
mod text;

pub use audio::AudioEncoder;
pub use batch::{Batch, PreparedClip};
pub use config::ModelConfig;
pub use decoder::LevelDecoder;
pub use discriminator::Discriminator;
pub use generator::{shift_frames, Feedback, GenOutput, Generator};
pub use style::{blend, Identity, StyleOut, StylePathway};
pub use text::TextEncoder;

use thiserror::Error;

use crate::pose::PoseError;
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("mel spectrogram is {got_bins}x{got_frames}, expected {bins}x{frames}")]
    BadMelShape { bins: usize, frames: usize, got_bins: usize, got_frames: usize },
    #[error("unknown speaker {0}")]
    UnknownSpeaker(usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("pose has {0} frames; the discriminator needs at least 7")]
    TooShort(usize),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pose(#[from] PoseError),
}

pub(crate) const SLOPE: f64 = 0.2;

/// Index map from `[B, C, N]` channel-major to time-major `[N * B, C]` rows.
pub(crate) fn to_time_major(tape: &mut crate::tensor::Tape, x: crate::tensor::Var) -> Result<crate::tensor::Var, TensorError> {
    let s = tape.shape(x).to_vec();
    let y = tape.permute(x, &[2, 0, 1])?;
    tape.reshape(y, &[s[2] * s[0], s[1]])
}

/// Inverse of [`to_time_major`].
pub(crate) fn to_channel_major(
    tape: &mut crate::tensor::Tape,
    x: crate::tensor::Var,
    frames: usize,
    batch: usize,
) -> Result<crate::tensor::Var, TensorError> {
    let c = tape.value(x).last_dim();
    let y = tape.reshape(x, &[frames, batch, c])?;
    tape.permute(y, &[1, 2, 0])
}
