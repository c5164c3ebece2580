use super::{ModelConfig, ModelError};
use crate::data::{mel_spectrogram, DataError, MelConfig, MelSpectrogram};
use crate::pose::PoseSequence;
use crate::tensor::Tensor;

const LOG_EPS: f64 = 1e-6;

/// One clip converted to network inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedClip {
    /// `ln(mel + 1e-6)`, bin-major `bins x T`.
    pub logmel: Vec<f64>,
    pub bins: usize,
    pub mel_frames: usize,
    /// One token per pose frame; 0 pads.
    pub tokens: Vec<usize>,
    pub speaker: usize,
    /// Time-major `N x pose_dim` direction vectors. Only the first `M`
    /// frames are read when generating without ground truth.
    pub pose: Vec<f64>,
    pub frames: usize,
}

impl PreparedClip {
    /// Tokens are padded with 0 or truncated to the clip length.
    pub fn new(mel: &MelSpectrogram, tokens: &[u32], speaker: usize, pose: &PoseSequence) -> Self {
        let frames = pose.frames();
        let mut tokens: Vec<usize> = tokens.iter().map(|&t| t as usize).take(frames).collect();
        tokens.resize(frames, 0);
        Self {
            logmel: mel.values.iter().map(|v| (v + LOG_EPS).ln()).collect(),
            bins: mel.bins,
            mel_frames: mel.frames,
            tokens,
            speaker,
            pose: pose.data().to_vec(),
            frames,
        }
    }

    /// Computes the mel spectrogram of `audio` first.
    pub fn from_audio(audio: &[f64], mel: &MelConfig, tokens: &[u32], speaker: usize, pose: &PoseSequence) -> Result<Self, DataError> {
        Ok(Self::new(&mel_spectrogram(audio, mel)?, tokens, speaker, pose))
    }
}

/// Stacked inputs for a set of clips. Pose tensors are time-major `[N * B, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub frames: usize,
    pub logmel: Tensor,
    /// Clip-major `[B * N]`.
    pub tokens: Vec<usize>,
    pub speakers: Vec<usize>,
    /// Level-1 seed poses: the first `M` frames of the truth, zeros after.
    pub seed: Tensor,
    /// Per-level ground truth.
    pub truth: Vec<Tensor>,
}

impl Batch {
    pub fn new(cfg: &ModelConfig, dims: &[usize], clips: &[&PreparedClip]) -> Result<Self, ModelError> {
        let b = clips.len();
        let n = cfg.frames;
        let (bins, t_mel) = (cfg.mel.bins, cfg.mel_frames());
        let full = *dims.last().ok_or_else(|| ModelError::Config("empty hierarchy".into()))?;
        let mut logmel = Vec::with_capacity(b * bins * t_mel);
        let mut tokens = Vec::with_capacity(b * n);
        for c in clips {
            if c.bins != bins || c.mel_frames != t_mel {
                return Err(ModelError::BadMelShape { bins, frames: t_mel, got_bins: c.bins, got_frames: c.mel_frames });
            }
            if c.frames != n || c.pose.len() != n * full {
                return Err(ModelError::DimMismatch(format!("clip pose has {} values, expected {}x{}", c.pose.len(), n, full)));
            }
            logmel.extend_from_slice(&c.logmel);
            tokens.extend_from_slice(&c.tokens);
        }
        let level = |d: usize, upto: usize| {
            let mut data = vec![0.0; n * b * d];
            for t in 0..upto {
                for (bi, c) in clips.iter().enumerate() {
                    let row = (t * b + bi) * d;
                    data[row..row + d].copy_from_slice(&c.pose[t * full..t * full + d]);
                }
            }
            Tensor::new(vec![n * b, d], data)
        };
        let truth = dims.iter().map(|&d| level(d, n)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            size: b,
            frames: n,
            logmel: Tensor::new(vec![b, bins, t_mel], logmel)?,
            tokens,
            speakers: clips.iter().map(|c| c.speaker).collect(),
            seed: level(dims[0], cfg.seed_frames.min(n))?,
            truth,
        })
    }
}
