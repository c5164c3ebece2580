use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::MetricsError;
use crate::nn::{BatchNorm, Bound, ConvTranspose1d, Conv1d, Ctx, Linear, ParamStore};
use crate::tensor::{Adam, AdamState, Tape, Tensor, TensorError, Var};

const SLOPE: f64 = 0.2;
const LATENT: usize = 128;

/// Training schedule for [`PoseAutoencoder::train`].
#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of clips held out to measure reconstruction error.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for AutoencoderTraining {
    fn default() -> Self {
        Self { epochs: 20, batch: 32, lr: 1e-3, holdout: 0.1, seed: 0 }
    }
}

/// Held-out reconstruction error before and after training.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
}

/// Convolutional pose autoencoder whose encoder provides the FGD features.
///
/// Clips are flat time-major arrays of `frames x pose_dim` values.
#[derive(Clone, Debug)]
pub struct PoseAutoencoder {
    pub frames: usize,
    pub pose_dim: usize,
    pub store: ParamStore,
    enc_convs: Vec<Conv1d>,
    enc_bns: Vec<BatchNorm>,
    enc_fc: Vec<Linear>,
    enc_fc_bns: Vec<BatchNorm>,
    dec_fc: Vec<Linear>,
    dec_fc_bn: BatchNorm,
    dec_convt: Vec<ConvTranspose1d>,
    dec_convt_bns: Vec<BatchNorm>,
    dec_convs: Vec<Conv1d>,
}

impl PoseAutoencoder {
    /// Needs at least 12 frames for the encoder's convolution stack.
    pub fn new(frames: usize, pose_dim: usize, seed: u64) -> Result<Self, MetricsError> {
        let conv_len = Self::conv_len(frames).ok_or(MetricsError::TooShort)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let r = &mut rng;
        let enc_convs = vec![
            Conv1d::new(s, "enc.conv0", pose_dim, 32, 3, 1, 0, r),
            Conv1d::new(s, "enc.conv1", 32, 64, 3, 1, 0, r),
            Conv1d::new(s, "enc.conv2", 64, 64, 4, 2, 0, r),
            Conv1d::new(s, "enc.conv3", 64, 32, 3, 1, 0, r),
        ];
        let enc_bns = vec![BatchNorm::new(s, "enc.bn0", 32), BatchNorm::new(s, "enc.bn1", 64), BatchNorm::new(s, "enc.bn2", 64)];
        let enc_fc = vec![
            Linear::new(s, "enc.fc0", 32 * conv_len, 256, true, r),
            Linear::new(s, "enc.fc1", 256, 128, true, r),
            Linear::new(s, "enc.fc2", 128, LATENT, true, r),
        ];
        let enc_fc_bns = vec![BatchNorm::new(s, "enc.fc_bn0", 256), BatchNorm::new(s, "enc.fc_bn1", 128)];
        let dec_fc = vec![Linear::new(s, "dec.fc0", LATENT, 64, true, r), Linear::new(s, "dec.fc1", 64, 4 * frames, true, r)];
        let dec_fc_bn = BatchNorm::new(s, "dec.fc_bn0", 64);
        let dec_convt = vec![ConvTranspose1d::new(s, "dec.convt0", 4, 32, 3, r), ConvTranspose1d::new(s, "dec.convt1", 32, 32, 3, r)];
        let dec_convt_bns = vec![BatchNorm::new(s, "dec.bn0", 32), BatchNorm::new(s, "dec.bn1", 32)];
        let dec_convs = vec![Conv1d::new(s, "dec.conv0", 32, 32, 3, 1, 0, r), Conv1d::new(s, "dec.conv1", 32, pose_dim, 3, 1, 0, r)];
        Ok(Self { frames, pose_dim, store, enc_convs, enc_bns, enc_fc, enc_fc_bns, dec_fc, dec_fc_bn, dec_convt, dec_convt_bns, dec_convs })
    }

    /// Length after the encoder convolutions: k3, k3, k4 stride 2, k3.
    fn conv_len(frames: usize) -> Option<usize> {
        let t = frames.checked_sub(4)?;
        let t = t.checked_sub(4)? / 2 + 1;
        t.checked_sub(2).filter(|&t| t > 0)
    }

    pub fn latent_dim(&self) -> usize {
        LATENT
    }

    fn input(&self, clips: &[&[f64]]) -> Result<Tensor, MetricsError> {
        let (n, d) = (self.frames, self.pose_dim);
        let mut data = vec![0.0; clips.len() * d * n];
        for (b, clip) in clips.iter().enumerate() {
            if clip.len() != n * d {
                return Err(MetricsError::DimMismatch(format!("clip has {} values, expected {}x{}", clip.len(), n, d)));
            }
            for t in 0..n {
                for c in 0..d {
                    data[(b * d + c) * n + t] = clip[t * d + c];
                }
            }
        }
        Ok(Tensor::new(vec![clips.len(), d, n], data)?)
    }

    fn encode_var(&self, ctx: &Ctx, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for (i, conv) in self.enc_convs.iter().enumerate() {
            h = conv.forward(ctx, tape, h)?;
            if let Some(bn) = self.enc_bns.get(i) {
                h = bn.forward(ctx, tape, h)?;
                h = tape.leaky_relu(h, SLOPE);
            }
        }
        let b = tape.shape(h)[0];
        let flat = tape.shape(h)[1] * tape.shape(h)[2];
        h = tape.reshape(h, &[b, flat])?;
        for (i, fc) in self.enc_fc.iter().enumerate() {
            h = fc.forward(ctx, tape, h)?;
            if let Some(bn) = self.enc_fc_bns.get(i) {
                h = bn.forward(ctx, tape, h)?;
                h = tape.leaky_relu(h, SLOPE);
            }
        }
        Ok(h)
    }

    fn decode_var(&self, ctx: &Ctx, tape: &mut Tape, z: Var) -> Result<Var, TensorError> {
        let b = tape.shape(z)[0];
        let mut h = self.dec_fc[0].forward(ctx, tape, z)?;
        h = self.dec_fc_bn.forward(ctx, tape, h)?;
        h = tape.leaky_relu(h, SLOPE);
        h = self.dec_fc[1].forward(ctx, tape, h)?;
        h = tape.reshape(h, &[b, 4, self.frames])?;
        for (ct, bn) in self.dec_convt.iter().zip(&self.dec_convt_bns) {
            h = ct.forward(ctx, tape, h)?;
            h = bn.forward(ctx, tape, h)?;
            h = tape.leaky_relu(h, SLOPE);
        }
        h = self.dec_convs[0].forward(ctx, tape, h)?;
        self.dec_convs[1].forward(ctx, tape, h)
    }

    fn recon_loss(&self, ctx: &Ctx, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let z = self.encode_var(ctx, tape, x)?;
        let y = self.decode_var(ctx, tape, z)?;
        let d = tape.sub(y, x)?;
        let sq = tape.square(d);
        Ok(tape.mean(sq))
    }

    /// 128-d latent per clip.
    pub fn encode(&self, clips: &[&[f64]]) -> Result<Vec<Vec<f64>>, MetricsError> {
        let mut out = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(256) {
            let mut tape = Tape::new();
            let bound = self.store.bind(&mut tape, false);
            let ctx = Ctx::new(&bound);
            let x = tape.constant(self.input(chunk)?);
            let z = self.encode_var(&ctx, &mut tape, x)?;
            out.extend(tape.value(z).data().chunks(LATENT).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Time-major reconstructions, one per clip.
    pub fn reconstruct(&self, clips: &[&[f64]]) -> Result<Vec<Vec<f64>>, MetricsError> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let ctx = Ctx::new(&bound);
        let x = tape.constant(self.input(clips)?);
        let z = self.encode_var(&ctx, &mut tape, x)?;
        let y = self.decode_var(&ctx, &mut tape, z)?;
        let y = tape.permute(y, &[0, 2, 1])?;
        Ok(tape.value(y).data().chunks(self.frames * self.pose_dim).map(<[f64]>::to_vec).collect())
    }

    /// Mean squared reconstruction error with frozen statistics.
    pub fn reconstruction_error(&self, clips: &[&[f64]]) -> Result<f64, MetricsError> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let x = tape.constant(self.input(clips)?);
        let loss = self.recon_loss(&Ctx::new(&bound), &mut tape, x)?;
        Ok(tape.value(loss).item())
    }

    /// Sets every batch-norm buffer from the statistics of `clips`.
    pub fn calibrate(&mut self, clips: &[&[f64]]) -> Result<(), MetricsError> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let ctx = Ctx::calibrating(&bound);
        let x = tape.constant(self.input(clips)?);
        self.recon_loss(&ctx, &mut tape, x)?;
        ctx.commit(&mut self.store);
        Ok(())
    }

    /// Fits the autoencoder with Adam on mean squared error. Each step
    /// normalises with its own batch statistics.
    pub fn train(&mut self, clips: &[&[f64]], cfg: &AutoencoderTraining) -> Result<AutoencoderReport, MetricsError> {
        if clips.len() < 2 {
            return Err(MetricsError::TooFewClips(clips.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut rng);
        let held = ((clips.len() as f64 * cfg.holdout).round() as usize).min(clips.len() - 1);
        let holdout: Vec<&[f64]> = order[..held].iter().map(|&i| clips[i]).collect();
        let mut train: Vec<&[f64]> = order[held..].iter().map(|&i| clips[i]).collect();
        let eval_set: Vec<&[f64]> = if holdout.is_empty() { train.clone() } else { holdout };
        let calib_set: Vec<&[f64]> = train.iter().take(512).copied().collect();

        self.calibrate(&calib_set)?;
        let initial_loss = self.reconstruction_error(&eval_set)?;
        let adam = Adam::new(cfg.lr);
        let mut state = AdamState::default();
        let ids = self.store.trainable_ids();
        for epoch in 0..cfg.epochs {
            train.shuffle(&mut rng);
            for batch in train.chunks(cfg.batch.max(2)) {
                if batch.len() < 2 {
                    continue;
                }
                let mut tape = Tape::new();
                let bound: Bound = self.store.bind(&mut tape, true);
                let ctx = Ctx::calibrating(&bound);
                let x = tape.constant(self.input(batch)?);
                let loss = self.recon_loss(&ctx, &mut tape, x)?;
                if !tape.value(loss).item().is_finite() {
                    return Err(MetricsError::Divergence(epoch));
                }
                let mut grads = tape.backward(loss)?;
                let g: Vec<Tensor> = ids.iter().map(|&id| grads.take(bound.var(id))).collect();
                let mut params: Vec<Tensor> = ids.iter().map(|&id| self.store.get(id).clone()).collect();
                adam.step(&mut state, &mut params, &g);
                for (&id, p) in ids.iter().zip(params) {
                    *self.store.get_mut(id) = p;
                }
            }
            self.calibrate(&calib_set)?;
        }
        let final_loss = self.reconstruction_error(&eval_set)?;
        if !final_loss.is_finite() {
            return Err(MetricsError::Divergence(cfg.epochs));
        }
        Ok(AutoencoderReport { initial_loss, final_loss, epochs: cfg.epochs })
    }
}
