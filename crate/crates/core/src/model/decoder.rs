use rand::Rng;

use crate::nn::{BiGru, Ctx, Linear, ParamStore};
use crate::tensor::{Tape, TensorError, Var};

/// Bi-GRU decoder for one hierarchy level.
///
/// Each frame's output is a linear map of the top GRU state, the previous
/// level's pose and the blended audio feature (and, in autoregressive mode,
/// this level's previous frame).
#[derive(Clone, Debug)]
pub struct LevelDecoder {
    pub prev_dim: usize,
    pub feat_dim: usize,
    pub out_dim: usize,
    pub feedback: bool,
    grus: Vec<BiGru>,
    pub out: Linear,
}

impl LevelDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        prev_dim: usize,
        feat_dim: usize,
        out_dim: usize,
        hidden: usize,
        layers: usize,
        feedback: bool,
        rng: &mut R,
    ) -> Self {
        let in_dim = prev_dim + feat_dim + if feedback { out_dim } else { 0 };
        let grus = (0..layers.max(1))
            .map(|l| BiGru::new(store, &format!("{name}.gru{l}"), if l == 0 { in_dim } else { 2 * hidden }, hidden, rng))
            .collect();
        let out = Linear::new(store, &format!("{name}.out"), 2 * hidden + in_dim, out_dim, true, rng);
        Self { prev_dim, feat_dim, out_dim, feedback, grus, out }
    }

    /// All inputs are time-major `[N * B, _]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        ctx: &Ctx,
        tape: &mut Tape,
        prev: Var,
        feat: Var,
        feedback: Option<Var>,
        frames: usize,
        batch: usize,
    ) -> Result<Var, TensorError> {
        let mut parts = vec![prev, feat];
        parts.extend(feedback);
        let x = tape.concat(&parts, 1)?;
        let mut h = x;
        for gru in &self.grus {
            h = gru.forward_concat(ctx, tape, h, frames, batch)?;
        }
        let z = tape.concat(&[h, x], 1)?;
        self.out.forward(ctx, tape, z)
    }
}
