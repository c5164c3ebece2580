use rand::Rng;

use super::{to_time_major, ModelConfig, SLOPE};
use crate::nn::{Conv1d, Ctx, Embedding, ParamStore};
use crate::tensor::{Tape, TensorError, Var};

/// Word embeddings followed by a temporal convolution stack with a
/// 16-token receptive field centred on each frame.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab: usize,
    embed: Embedding,
    convs: Vec<Conv1d>,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let embed = Embedding::new(store, "text.embed", cfg.vocab + 1, cfg.embed_dim, rng);
        let c = cfg.text_channels;
        let convs = vec![
            Conv1d::new(store, "text.conv0", cfg.embed_dim, c, 5, 1, 2, rng),
            Conv1d::new(store, "text.conv1", c, c, 5, 1, 2, rng),
            Conv1d::new(store, "text.conv2", c, c, 5, 1, 2, rng),
            Conv1d::new(store, "text.conv3", c, cfg.feat_dim, 4, 1, 2, rng),
        ];
        Self { vocab: cfg.vocab, embed, convs }
    }

    /// Maps ids outside the vocabulary to the OOV row, logging each one.
    pub fn map_tokens(&self, tokens: &[usize]) -> Vec<usize> {
        tokens
            .iter()
            .map(|&t| {
                if t < self.vocab {
                    t
                } else {
                    log::warn!("token id {t} outside vocabulary of {}; using the OOV embedding", self.vocab);
                    self.vocab
                }
            })
            .collect()
    }

    /// Clip-major tokens `[B * N]` to time-major features `[N * B, d]`.
    pub fn forward(&self, ctx: &Ctx, tape: &mut Tape, tokens: &[usize], batch: usize) -> Result<Var, TensorError> {
        let n = tokens.len() / batch.max(1);
        let ids = self.map_tokens(tokens);
        let e = self.embed.forward(ctx, tape, &ids)?;
        let e = tape.reshape(e, &[batch, n, self.embed.dim])?;
        let mut h = tape.permute(e, &[0, 2, 1])?;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(ctx, tape, h)?;
            if i + 1 < self.convs.len() {
                h = tape.leaky_relu(h, SLOPE);
            }
        }
        // The even final kernel yields N + 1 steps; keeping the first N gives a 2/1 pad split.
        let h = tape.slice(h, 2, 0, n)?;
        to_time_major(tape, h)
    }
}
