//! Training objectives, built on the differentiation tape.
//!
//! Pose tensors are time-major `[N * B, D]` (row `t * B + b`).

use std::rc::Rc;

use thiserror::Error;

use crate::pose::AngleProfile;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Smallest and largest probability fed to a logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("style identities are identical (L1 distance {0:e})")]
    IdenticalIdentities(f64),
    #[error("angle {0} has non-positive variance")]
    DegenerateVariance(usize),
    #[error("non-finite loss component `{0}`")]
    NonFinite(String),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, LossError>;

/// Weights of the total objective and loss hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the adversarial generator term.
    pub lambda_gan: f64,
    pub lambda_h: f64,
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub lambda_k: f64,
    pub lambda_c: f64,
    pub tau: f64,
    pub epsilon_clip: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_gan: 1.0,
            lambda_h: 200.0,
            lambda_p: 0.1,
            lambda_s: 0.05,
            lambda_k: 0.1,
            lambda_c: 0.1,
            tau: 0.07,
            epsilon_clip: 1000.0,
            huber_delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_gan, self.lambda_h, self.lambda_p, self.lambda_s, self.lambda_k, self.lambda_c];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(LossError::InvalidWeights("lambdas must be finite and nonnegative".into()));
        }
        for (name, v) in [("tau", self.tau), ("epsilon_clip", self.epsilon_clip), ("huber_delta", self.huber_delta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(LossError::InvalidWeights(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Values of every component of the total objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub gan: f64,
    pub huber: f64,
    pub physical: f64,
    pub style: f64,
    pub kld: f64,
    pub contrastive: f64,
}

impl LossComponents {
    pub const NAMES: [&'static str; 6] = ["gan", "huber", "physical", "style", "kld", "contrastive"];

    pub fn values(&self) -> [f64; 6] {
        [self.gan, self.huber, self.physical, self.style, self.kld, self.contrastive]
    }
}

/// Weighted sum of the components.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in LossComponents::NAMES.iter().zip(c.values()) {
        if !v.is_finite() {
            return Err(LossError::NonFinite((*name).into()));
        }
    }
    Ok(w.lambda_gan * c.gan
        + w.lambda_h * c.huber
        + w.lambda_p * c.physical
        + w.lambda_s * c.style
        + w.lambda_k * c.kld
        + w.lambda_c * c.contrastive)
}

/// Mean over levels of the mean elementwise Huber loss of each level.
pub fn huber_hierarchical(tape: &mut Tape, pred: &[Var], truth: &[Var], delta: f64) -> Result<Var> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(LossError::DimMismatch(format!("{} predicted levels vs {} true", pred.len(), truth.len())));
    }
    let mut per_level = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(truth) {
        if tape.shape(p) != tape.shape(t) {
            return Err(LossError::DimMismatch(format!("{:?} vs {:?}", tape.shape(p), tape.shape(t))));
        }
        let d = tape.sub(p, t)?;
        let h = tape.huber(d, delta);
        let m = tape.mean(h);
        per_level.push(tape.reshape(m, &[1])?);
    }
    let all = tape.concat(&per_level, 0)?;
    Ok(tape.mean(all))
}

fn check_nonzero_rows(tape: &Tape, x: Var) -> Result<()> {
    let d = tape.value(x).last_dim();
    if tape.value(x).data().chunks(d).any(|r| r.iter().all(|v| *v == 0.0)) {
        return Err(LossError::ZeroVector);
    }
    Ok(())
}

/// Multi-level contrastive loss.
///
/// For each frame, each clip's text feature is scored by cosine similarity
/// against the low, mid and high audio features of every clip in the batch;
/// its own high-level feature is the positive. Averages over frames and clips.
pub fn contrastive_multilevel(tape: &mut Tape, text: Var, audio: &[Var; 3], frames: usize, batch: usize, tau: f64) -> Result<Var> {
    let d = tape.value(text).last_dim();
    for &a in audio {
        if tape.shape(a) != tape.shape(text) {
            return Err(LossError::DimMismatch(format!("audio {:?} vs text {:?}", tape.shape(a), tape.shape(text))));
        }
    }
    if tape.shape(text) != [frames * batch, d] {
        return Err(LossError::DimMismatch(format!("text {:?} for {} frames x {} clips", tape.shape(text), frames, batch)));
    }
    check_nonzero_rows(tape, text)?;
    for &a in audio {
        check_nonzero_rows(tape, a)?;
    }
    let t_n = tape.normalize_rows(text);
    let a_n: Vec<Var> = audio.iter().map(|&a| tape.normalize_rows(a)).collect();
    let pos_index: Rc<[usize]> = (0..batch).map(|b| b * 3 * batch + 2 * batch + b).collect();
    let mut terms = Vec::with_capacity(frames);
    for t in 0..frames {
        let q = tape.slice(t_n, 0, t * batch, batch)?;
        let keys: Vec<Var> = a_n.iter().map(|&a| tape.slice(a, 0, t * batch, batch)).collect::<std::result::Result<_, _>>()?;
        let k = tape.concat(&keys, 0)?;
        let kt = tape.permute(k, &[1, 0])?;
        let sims = tape.matmul(q, kt)?;
        let logits = tape.scale(sims, 1.0 / tau);
        let lse = tape.logsumexp(logits);
        let pos = tape.gather(logits, pos_index.clone(), &[batch])?;
        terms.push(tape.sub(lse, pos)?);
    }
    let all = tape.concat(&terms, 0)?;
    Ok(tape.mean(all))
}

fn clamped_log(tape: &mut Tape, p: Var) -> Var {
    let c = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    tape.log(c)
}

/// Non-saturating generator loss `-mean(log D(fake))`.
pub fn gan_generator_loss(tape: &mut Tape, d_fake: Var) -> Var {
    let l = clamped_log(tape, d_fake);
    let m = tape.mean(l);
    tape.neg(m)
}

/// `-mean(log D(real)) - mean(log(1 - D(fake)))`.
pub fn gan_discriminator_loss(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    let lr = clamped_log(tape, d_real);
    let real = tape.mean(lr);
    let nf = tape.neg(d_fake);
    let one_minus = tape.add_scalar(nf, 1.0);
    let lf = clamped_log(tape, one_minus);
    let fake = tape.mean(lf);
    let s = tape.add(real, fake)?;
    Ok(tape.neg(s))
}

/// Per-clip mean Huber distance between two generated sequences, as `[B]`.
fn sequence_huber(tape: &mut Tape, a: Var, b: Var, frames: usize, batch: usize, delta: f64) -> Result<Var> {
    let d = tape.value(a).last_dim();
    let diff = tape.sub(a, b)?;
    let h = tape.huber(diff, delta);
    let rows = tape.sum_rows(h);
    let grid = tape.reshape(rows, &[frames, batch])?;
    let per_clip = tape.permute(grid, &[1, 0])?;
    let s = tape.sum_rows(per_clip);
    Ok(tape.scale(s, 1.0 / (frames * d) as f64))
}

/// Style-diverging loss `-mean(min(Huber(p1, p2) / |id1 - id2|_1, eps))`.
#[allow(clippy::too_many_arguments)]
pub fn style_diverging(
    tape: &mut Tape,
    pred1: Var,
    pred2: Var,
    id1: Var,
    id2: Var,
    frames: usize,
    batch: usize,
    epsilon_clip: f64,
    delta: f64,
) -> Result<Var> {
    if tape.shape(pred1) != tape.shape(pred2) || tape.shape(id1) != tape.shape(id2) {
        return Err(LossError::DimMismatch("style loss operands differ in shape".into()));
    }
    let num = sequence_huber(tape, pred1, pred2, frames, batch, delta)?;
    let did = tape.sub(id1, id2)?;
    let den = tape.l1_norm(did);
    if let Some(&min) = tape.value(den).data().iter().min_by(|a, b| a.total_cmp(b)) {
        if min <= 1e-8 {
            return Err(LossError::IdenticalIdentities(min));
        }
    }
    let ratio = tape.div(num, den)?;
    let clipped = tape.min_const(ratio, epsilon_clip);
    let m = tape.mean(clipped);
    Ok(tape.neg(m))
}

/// KL divergence to the standard normal, summed over dimensions and averaged over rows.
pub fn kld_loss(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    if tape.shape(mu) != tape.shape(logvar) {
        return Err(LossError::DimMismatch(format!("{:?} vs {:?}", tape.shape(mu), tape.shape(logvar))));
    }
    let m2 = tape.square(mu);
    let ev = tape.exp(logvar);
    let a = tape.add(m2, ev)?;
    let b = tape.sub(a, logvar)?;
    let c = tape.add_scalar(b, -1.0);
    let rows = tape.sum_rows(c);
    let m = tape.mean(rows);
    Ok(tape.scale(m, 0.5))
}

/// Included angles in degrees, `[rows, pairs]`, of time-major bone vectors.
pub fn pose_angles(tape: &mut Tape, pose: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let d = tape.value(pose).last_dim();
    let rows = tape.value(pose).len() / d.max(1);
    let bones = d / 3;
    if d % 3 != 0 || pairs.iter().any(|&(a, b)| a >= bones || b >= bones) {
        return Err(LossError::DimMismatch(format!("{} values per frame for angle pairs", d)));
    }
    let gather_bone = |sel: fn(&(usize, usize)) -> usize| -> Rc<[usize]> {
        (0..rows).flat_map(|r| pairs.iter().flat_map(move |p| (0..3).map(move |k| r * d + sel(p) * 3 + k))).collect()
    };
    let shape = [rows * pairs.len(), 3];
    let u = tape.gather(pose, gather_bone(|p| p.0), &shape)?;
    let v = tape.gather(pose, gather_bone(|p| p.1), &shape)?;
    let cos = tape.cosine_similarity(u, v)?;
    let ang = tape.acos(cos, 1e-7);
    let deg = tape.scale(ang, 180.0 / std::f64::consts::PI);
    Ok(tape.reshape(deg, &[rows, pairs.len()])?)
}

/// Gaussian negative log-likelihood of angles `[rows, A]` in degrees,
/// summed over angles and averaged over rows.
pub fn physical_loss(tape: &mut Tape, angles: Var, profile: &AngleProfile) -> Result<Var> {
    let s = tape.shape(angles).to_vec();
    if s.len() != 2 || s[1] != profile.len() {
        return Err(LossError::DimMismatch(format!("angles {:?} vs profile of {}", s, profile.len())));
    }
    if let Some(j) = profile.variances.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(LossError::DegenerateVariance(j));
    }
    let rows = s[0];
    let neg_mu = tape.constant(Tensor::vector(profile.means.iter().map(|m| -m).collect()));
    let z = tape.add_bias(angles, neg_mu)?;
    let z2 = tape.square(z);
    let inv: Vec<f64> = (0..rows).flat_map(|_| profile.variances.iter().map(|v| 0.5 / v)).collect();
    let inv = tape.constant(Tensor::new(s.clone(), inv)?);
    let q = tape.mul(z2, inv)?;
    let total = tape.sum(q);
    let per_row = tape.scale(total, 1.0 / rows.max(1) as f64);
    let norm: f64 = profile.variances.iter().map(|v| 0.5 * (2.0 * std::f64::consts::PI * v).ln()).sum();
    Ok(tape.add_scalar(per_row, norm))
}
