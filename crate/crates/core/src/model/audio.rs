use std::rc::Rc;

use rand::Rng;

use super::{to_time_major, ModelConfig, ModelError, SLOPE};
use crate::nn::{BatchNorm, Conv1d, Ctx, Linear, ParamStore};
use crate::tensor::{Tape, TensorError, Var};

/// Upsample, project to the clip length, normalise, then map each frame to the feature width.
#[derive(Clone, Debug)]
struct Head {
    shuffle: usize,
    conv: Conv1d,
    bn: BatchNorm,
    fc: Linear,
}

/// Strided convolution stack over log-mel input with three feature taps.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub bins: usize,
    pub mel_frames: usize,
    pub frames: usize,
    input_bn: BatchNorm,
    convs: Vec<Conv1d>,
    bns: Vec<BatchNorm>,
    heads: Vec<Head>,
}

/// `out[b, c, t * r + i] = x[b, c * r + i, t]`.
fn pixel_shuffle(tape: &mut Tape, x: Var, r: usize) -> Result<Var, TensorError> {
    if r == 1 {
        return Ok(x);
    }
    let s = tape.shape(x).to_vec();
    let (b, cr, l) = (s[0], s[1], s[2]);
    let c = cr / r;
    let mut index = Vec::with_capacity(b * cr * l);
    for bi in 0..b {
        for ci in 0..c {
            for j in 0..l * r {
                let (t, i) = (j / r, j % r);
                index.push((bi * cr + ci * r + i) * l + t);
            }
        }
    }
    tape.gather(x, Rc::from(index), &[b, c, l * r])
}

impl AudioEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        let bins = cfg.mel.bins;
        let mel_frames = cfg.mel_frames();
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut heads = Vec::new();
        let mut c_in = bins;
        let mut len = mel_frames;
        for (i, &c) in cfg.audio_channels.iter().enumerate() {
            let conv = Conv1d::new(store, &format!("audio.conv{i}"), c_in, c, 3, 2, 1, rng);
            len = conv.out_len(len);
            convs.push(conv);
            bns.push(BatchNorm::new(store, &format!("audio.bn{i}"), c));
            let r = 1 << i;
            if c % r != 0 {
                return Err(ModelError::Config(format!("audio channels {c} not divisible by upsample factor {r}")));
            }
            if len * r < cfg.frames {
                return Err(ModelError::Config(format!("audio tap {i} has {} steps, fewer than {} frames", len * r, cfg.frames)));
            }
            let k = len * r - cfg.frames + 1;
            heads.push(Head {
                shuffle: r,
                conv: Conv1d::new(store, &format!("audio.head{i}.conv"), c / r, cfg.head_channels, k, 1, 0, rng),
                bn: BatchNorm::new(store, &format!("audio.head{i}.bn"), cfg.head_channels),
                fc: Linear::new(store, &format!("audio.head{i}.fc"), cfg.head_channels, cfg.feat_dim, true, rng),
            });
            c_in = c;
        }
        Ok(Self { bins, mel_frames, frames: cfg.frames, input_bn: BatchNorm::new(store, "audio.input_bn", bins), convs, bns, heads })
    }

    /// Log-mel `[B, bins, T]` to low, mid and high features, each `[N * B, d_a]` time-major.
    pub fn forward(&self, ctx: &Ctx, tape: &mut Tape, logmel: Var) -> Result<[Var; 3], ModelError> {
        let s = tape.shape(logmel).to_vec();
        if s.len() != 3 || s[1] != self.bins || s[2] != self.mel_frames {
            return Err(ModelError::BadMelShape {
                bins: self.bins,
                frames: self.mel_frames,
                got_bins: s.get(1).copied().unwrap_or(0),
                got_frames: s.get(2).copied().unwrap_or(0),
            });
        }
        let mut h = self.input_bn.forward(ctx, tape, logmel)?;
        let mut taps = Vec::with_capacity(3);
        for ((conv, bn), head) in self.convs.iter().zip(&self.bns).zip(&self.heads) {
            h = conv.forward(ctx, tape, h)?;
            h = bn.forward(ctx, tape, h)?;
            h = tape.leaky_relu(h, SLOPE);
            let u = pixel_shuffle(tape, h, head.shuffle)?;
            let u = head.conv.forward(ctx, tape, u)?;
            let u = tape.relu(u);
            let u = head.bn.forward(ctx, tape, u)?;
            let u = to_time_major(tape, u)?;
            taps.push(head.fc.forward(ctx, tape, u)?);
        }
        Ok([taps[0], taps[1], taps[2]])
    }
}
