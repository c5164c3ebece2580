use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::style::blend;
use super::{AudioEncoder, Batch, Identity, LevelDecoder, ModelConfig, ModelError, StyleOut, StylePathway, TextEncoder};
use crate::nn::{Ctx, ParamStore};
use crate::pose::MotionHierarchy;
use crate::tensor::{Tape, Tensor, Var};

/// Previous-frame input of each level in autoregressive mode.
#[derive(Clone, Copy, Debug)]
pub enum Feedback<'a> {
    /// No feedback, or zeros when the model expects it.
    Off,
    /// Per-level `[N * B, d_h]` tensors whose row block `t` holds frame `t - 1`.
    Frames(&'a [Tensor]),
}

/// Graph handles of one generator pass.
#[derive(Clone, Debug)]
pub struct GenOutput {
    pub feats: [Var; 3],
    pub style: StyleOut,
    /// Raw per-level predictions, time-major `[N * B, d_h]`.
    pub levels: Vec<Var>,
    /// Final level with every bone vector rescaled to unit length.
    pub output: Var,
}

/// Audio encoder, text encoder, style pathway and cascaded level decoders.
#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: ModelConfig,
    pub dims: Vec<usize>,
    pub store: ParamStore,
    pub audio: AudioEncoder,
    pub text: TextEncoder,
    pub style: StylePathway,
    pub decoders: Vec<LevelDecoder>,
}

/// Shifts time-major rows down one frame; frame 0 becomes zeros.
pub fn shift_frames(t: &Tensor, batch: usize) -> Tensor {
    let d = t.last_dim();
    let mut data = vec![0.0; t.len()];
    let row = batch * d;
    if t.len() > row {
        data[row..].copy_from_slice(&t.data()[..t.len() - row]);
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

impl Generator {
    pub fn new(cfg: &ModelConfig, hierarchy: &MotionHierarchy, seed: u64) -> Result<Self, ModelError> {
        if cfg.seed_frames > cfg.frames {
            return Err(ModelError::Config(format!("{} seed frames exceed clip length {}", cfg.seed_frames, cfg.frames)));
        }
        let dims = hierarchy.pose_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let audio = AudioEncoder::new(&mut store, cfg, &mut rng)?;
        let text = TextEncoder::new(&mut store, cfg, &mut rng);
        let style = StylePathway::new(&mut store, cfg, dims.len(), &mut rng);
        let mut decoders = Vec::with_capacity(dims.len());
        for (h, &d) in dims.iter().enumerate() {
            let prev = if h == 0 { d } else { dims[h - 1] };
            decoders.push(LevelDecoder::new(
                &mut store,
                &format!("dec{h}"),
                prev,
                cfg.feat_dim,
                d,
                cfg.hidden,
                cfg.gru_layers,
                cfg.autoregressive,
                &mut rng,
            ));
        }
        Ok(Self { cfg: cfg.clone(), dims, store, audio, text, style, decoders })
    }

    pub fn levels(&self) -> usize {
        self.dims.len()
    }

    /// Audio features, style and decoded levels for `batch`.
    pub fn forward(&self, ctx: &Ctx, tape: &mut Tape, batch: &Batch, identity: Identity, feedback: Feedback) -> Result<GenOutput, ModelError> {
        let logmel = tape.constant(batch.logmel.clone());
        let feats = self.audio.forward(ctx, tape, logmel)?;
        let style = self.style.forward(ctx, tape, identity)?;
        self.decode(ctx, tape, batch, feats, style, feedback)
    }

    /// Runs the level cascade on precomputed features and style.
    pub fn decode(
        &self,
        ctx: &Ctx,
        tape: &mut Tape,
        batch: &Batch,
        feats: [Var; 3],
        style: StyleOut,
        feedback: Feedback,
    ) -> Result<GenOutput, ModelError> {
        let (n, b) = (batch.frames, batch.size);
        if tape.shape(style.coord)[0] != b * self.levels() {
            return Err(ModelError::DimMismatch(format!("style batch {} vs {}", tape.shape(style.coord)[0] / self.levels(), b)));
        }
        let mut prev = tape.constant(batch.seed.clone());
        let mut levels = Vec::with_capacity(self.levels());
        for (h, dec) in self.decoders.iter().enumerate() {
            let fa = blend(tape, style.coord, &feats, h, self.levels())?;
            let fb = match (dec.feedback, feedback) {
                (false, _) => None,
                (true, Feedback::Frames(f)) => Some(tape.constant(f[h].clone())),
                (true, Feedback::Off) => Some(tape.constant(Tensor::zeros(vec![n * b, dec.out_dim]))),
            };
            let out = dec.forward(ctx, tape, prev, fa, fb, n, b)?;
            levels.push(out);
            prev = out;
        }
        let last = *levels.last().expect("at least one level");
        let d = *self.dims.last().expect("at least one level");
        let v = tape.reshape(last, &[n * b * d / 3, 3])?;
        let v = tape.normalize_rows(v);
        let output = tape.reshape(v, &[n * b, d])?;
        Ok(GenOutput { feats, style, levels, output })
    }

    /// Inference without gradients. In autoregressive mode each level is
    /// rolled out frame by frame on its own predictions. Returns the
    /// normalised final level, time-major `[N * B, D]`.
    pub fn generate(&self, batch: &Batch, identity: Identity) -> Result<Tensor, ModelError> {
        if !self.cfg.autoregressive {
            let mut tape = Tape::new();
            let bound = self.store.bind(&mut tape, false);
            let out = self.forward(&Ctx::new(&bound), &mut tape, batch, identity, Feedback::Off)?;
            return Ok(tape.value(out.output).clone());
        }
        let (n, b) = (batch.frames, batch.size);
        let mut fb: Vec<Tensor> = self.dims.iter().map(|&d| Tensor::zeros(vec![n * b, d])).collect();
        let mut result = None;
        for t in 0..n {
            let mut tape = Tape::new();
            let bound = self.store.bind(&mut tape, false);
            let out = self.forward(&Ctx::new(&bound), &mut tape, batch, identity, Feedback::Frames(&fb))?;
            if t + 1 < n {
                for (h, &lv) in out.levels.iter().enumerate() {
                    let d = self.dims[h];
                    let src = tape.value(lv).data()[t * b * d..(t + 1) * b * d].to_vec();
                    fb[h].data_mut()[(t + 1) * b * d..(t + 2) * b * d].copy_from_slice(&src);
                }
            }
            result = Some(tape.value(out.output).clone());
        }
        Ok(result.expect("at least one frame"))
    }
}
