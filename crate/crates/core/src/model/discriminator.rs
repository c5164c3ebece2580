use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{to_channel_major, to_time_major, ModelConfig, ModelError, SLOPE};
use crate::nn::{BatchNorm, BiGru, Conv1d, Ctx, Linear, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Convolutional front end, summed bi-GRU and two linear heads ending in a
/// sigmoid real/fake probability per clip.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub frames: usize,
    pub pose_dim: usize,
    pub store: ParamStore,
    convs: Vec<Conv1d>,
    bns: Vec<BatchNorm>,
    gru: BiGru,
    frame_fc: Linear,
    clip_fc: Linear,
}

impl Discriminator {
    pub fn new(cfg: &ModelConfig, pose_dim: usize, seed: u64) -> Result<Self, ModelError> {
        if cfg.frames < 7 {
            return Err(ModelError::TooShort(cfg.frames));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (s, r) = (&mut store, &mut rng);
        let convs = vec![
            Conv1d::new(s, "disc.conv0", pose_dim, 16, 3, 1, 0, r),
            Conv1d::new(s, "disc.conv1", 16, 8, 3, 1, 0, r),
            Conv1d::new(s, "disc.conv2", 8, 8, 3, 1, 0, r),
        ];
        let bns = vec![BatchNorm::new(s, "disc.bn0", 16), BatchNorm::new(s, "disc.bn1", 8)];
        let gru = BiGru::new(s, "disc.gru", 8, cfg.disc_hidden, r);
        let frame_fc = Linear::new(s, "disc.frame_fc", cfg.disc_hidden, 1, true, r);
        let clip_fc = Linear::new(s, "disc.clip_fc", cfg.frames - 6, 1, true, r);
        Ok(Self { frames: cfg.frames, pose_dim, store, convs, bns, gru, frame_fc, clip_fc })
    }

    /// Time-major poses `[N * B, D]` to probabilities `[B, 1]`.
    pub fn forward(&self, ctx: &Ctx, tape: &mut Tape, pose: Var, batch: usize) -> Result<Var, ModelError> {
        self.run(ctx, tape, pose, batch, None)
    }

    /// Per-clip activation shapes from input to output, channel-major for
    /// the convolutional stage and time-major after it.
    pub fn shape_walk(&self) -> Result<Vec<Vec<usize>>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let pose = tape.constant(Tensor::zeros(vec![self.frames, self.pose_dim]));
        let mut walk = Vec::new();
        self.run(&Ctx::new(&bound), &mut tape, pose, 1, Some(&mut walk))?;
        Ok(walk)
    }

    fn run(&self, ctx: &Ctx, tape: &mut Tape, pose: Var, batch: usize, mut walk: Option<&mut Vec<Vec<usize>>>) -> Result<Var, ModelError> {
        let mut note = |tape: &Tape, v: Var| {
            if let Some(w) = walk.as_deref_mut() {
                let s = tape.shape(v);
                let dims: Vec<usize> = if s.len() == 3 { s[1..].to_vec() } else { s.iter().copied().filter(|&d| d != 1).collect() };
                w.push(if dims.is_empty() { vec![1] } else { dims });
            }
        };
        let s = tape.shape(pose).to_vec();
        if s.len() != 2 || s[1] != self.pose_dim || s[0] != batch * self.frames {
            if s.len() == 2 && s[1] == self.pose_dim && s[0] / batch.max(1) < 7 {
                return Err(ModelError::TooShort(s[0] / batch.max(1)));
            }
            return Err(ModelError::DimMismatch(format!("pose {:?}, expected [{}, {}]", s, batch * self.frames, self.pose_dim)));
        }
        let mut h = to_channel_major(tape, pose, self.frames, batch)?;
        note(tape, h);
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(ctx, tape, h)?;
            if let Some(bn) = self.bns.get(i) {
                h = bn.forward(ctx, tape, h)?;
                h = tape.leaky_relu(h, SLOPE);
            }
            note(tape, h);
        }
        let steps = self.frames - 6;
        let h = to_time_major(tape, h)?;
        let h = self.gru.forward_sum(ctx, tape, h, steps, batch)?;
        note(tape, h);
        let h = self.frame_fc.forward(ctx, tape, h)?;
        let h = tape.reshape(h, &[steps, batch])?;
        let h = tape.permute(h, &[1, 0])?;
        note(tape, h);
        let h = self.clip_fc.forward(ctx, tape, h)?;
        note(tape, h);
        Ok(tape.sigmoid(h))
    }
}
