use std::rc::Rc;

use rand::Rng;

use super::{ModelConfig, ModelError};
use crate::nn::{Ctx, Embedding, Linear, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Source of the style embedding for a batch.
#[derive(Clone, Copy, Debug)]
pub enum Identity<'a> {
    /// Known speakers. With `noise` (`[B, style_dim]` standard normal draws)
    /// the embedding is the reparameterised sample, otherwise the mean.
    Speakers { ids: &'a [usize], noise: Option<&'a Tensor> },
    /// Raw embeddings `[B, style_dim]`, e.g. sampled from the prior.
    Raw(&'a Tensor),
}

/// Style embedding plus the per-level blend weights it produces.
#[derive(Clone, Copy, Debug)]
pub struct StyleOut {
    pub f_id: Var,
    pub mu: Option<Var>,
    pub logvar: Option<Var>,
    /// `[B * H, 3]`: row `b * H + h` holds the low/mid/high weights of level `h`.
    pub coord: Var,
}

/// Per-speaker Gaussian embedding table and the coordinator head.
#[derive(Clone, Debug)]
pub struct StylePathway {
    pub speakers: usize,
    pub dim: usize,
    pub levels: usize,
    mu: Embedding,
    logvar: Embedding,
    pub coord: Linear,
}

impl StylePathway {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, levels: usize, rng: &mut R) -> Self {
        let mu = Embedding::new(store, "style.mu", cfg.speakers, cfg.style_dim, rng);
        let logvar = Embedding::new(store, "style.logvar", cfg.speakers, cfg.style_dim, rng);
        store.get_mut(mu.table).data_mut().iter_mut().for_each(|v| *v *= 0.1);
        store.get_mut(logvar.table).data_mut().fill(0.0);
        let coord = Linear::new(store, "style.coord", cfg.style_dim, 3 * levels, true, rng);
        Self { speakers: cfg.speakers, dim: cfg.style_dim, levels, mu, logvar, coord }
    }

    pub fn forward(&self, ctx: &Ctx, tape: &mut Tape, identity: Identity) -> Result<StyleOut, ModelError> {
        let (f_id, mu, logvar) = match identity {
            Identity::Speakers { ids, noise } => {
                if let Some(&bad) = ids.iter().find(|&&s| s >= self.speakers) {
                    return Err(ModelError::UnknownSpeaker(bad));
                }
                let mu = self.mu.forward(ctx, tape, ids)?;
                let lv = self.logvar.forward(ctx, tape, ids)?;
                let f = match noise {
                    Some(eps) => {
                        if eps.shape() != [ids.len(), self.dim] {
                            return Err(ModelError::DimMismatch(format!("style noise {:?}", eps.shape())));
                        }
                        let eps = tape.constant(eps.clone());
                        let half = tape.scale(lv, 0.5);
                        let std = tape.exp(half);
                        let dev = tape.mul(std, eps)?;
                        tape.add(mu, dev)?
                    }
                    None => mu,
                };
                (f, Some(mu), Some(lv))
            }
            Identity::Raw(t) => {
                if t.rank() != 2 || t.shape()[1] != self.dim {
                    return Err(ModelError::DimMismatch(format!("identity {:?}, expected [B, {}]", t.shape(), self.dim)));
                }
                (tape.constant(t.clone()), None, None)
            }
        };
        let logits = self.coord.forward(ctx, tape, f_id)?;
        let b = tape.shape(f_id)[0];
        let logits = tape.reshape(logits, &[b * self.levels, 3])?;
        let coord = tape.softmax(logits);
        Ok(StyleOut { f_id, mu, logvar, coord })
    }
}

/// Linear blend of the three audio levels with the weights of level `h`
/// (0-based). Features are time-major `[N * B, d]`.
pub fn blend(tape: &mut Tape, coord: Var, feats: &[Var; 3], h: usize, levels: usize) -> Result<Var, ModelError> {
    let b = tape.shape(coord)[0] / levels;
    let rows = tape.shape(feats[0])[0];
    let mut acc = None;
    for (l, &f) in feats.iter().enumerate() {
        let index: Rc<[usize]> = (0..rows).map(|r| ((r % b) * levels + h) * 3 + l).collect();
        let s = tape.gather(coord, index, &[rows])?;
        let term = tape.mul_rows(f, s)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("three levels"))
}
