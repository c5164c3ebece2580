//! Audio decoding, mel features, corpus files and the synthetic corpus.

mod corpus;
mod mel;
mod synth;
mod wav;

pub use corpus::{load_clips, parse_clips, save_clips, ClipRecord, FlatArray};
pub use mel::{mel_spectrogram, MelConfig, MelSpectrogram};
pub use synth::{synth_corpus, SynthClip, SynthSpec};
pub use wav::{read_wav, resample, write_wav, TARGET_RATE};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt WAV header: {0}")]
    CorruptHeader(String),
    #[error("signal too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("malformed corpus line {line_no}: {reason}")]
    MalformedLine { line_no: usize, reason: String },
    #[error("corpus line {line_no} is missing field `{name}`")]
    MissingField { line_no: usize, name: String },
    #[error("bad synthetic corpus spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
