//! Finite-difference checks of every loss and of sampled network parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use thiserror::Error;

use crate::data::{synth_corpus, DataError, SynthSpec};
use crate::losses::{self, LossError, LossWeights};
use crate::model::{ModelConfig, PreparedClip};
use crate::nn::ParamStore;
use crate::pose::{AngleProfile, Skeleton};
use crate::tensor::{gradient_check, Tape, Tensor, TensorError, Var};
use crate::train::{TrainConfig, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Worst relative error seen for one tensor under one loss.
#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub loss: String,
    pub tensor: String,
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Coordinates probed per network parameter tensor.
    pub samples_per_tensor: usize,
    /// Negate the analytic gradient of this loss, to prove the suite fails.
    pub flip: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { seed: 0, samples_per_tensor: 2, flip: None }
    }
}

pub const TOLERANCE: f64 = 1e-4;

fn rand_t(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

// Loss preconditions hold for the fixed inputs below, so only tensor
// errors can surface.
fn tens(e: LossError) -> TensorError {
    match e {
        LossError::Tensor(t) => t,
        other => panic!("loss rejected suite input: {other}"),
    }
}

/// Same value, negated gradient.
fn flipped(tape: &mut Tape, v: Var) -> Result<Var, TensorError> {
    let c = tape.constant(tape.value(v).clone());
    let c2 = tape.scale(c, 2.0);
    tape.sub(c2, v)
}

struct Runner<'a> {
    opts: &'a SuiteOptions,
    rows: Vec<GradRow>,
}

impl Runner<'_> {
    fn check<F>(&mut self, loss: &str, tensor: &str, x: &Tensor, eps: f64, f: F) -> Result<(), TensorError>
    where
        F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
    {
        let flip = self.opts.flip.as_deref() == Some(loss);
        let error = gradient_check(
            |tape, v| {
                let out = f(tape, v)?;
                if flip {
                    flipped(tape, out)
                } else {
                    Ok(out)
                }
            },
            x,
            eps,
        )?;
        self.rows.push(GradRow { loss: loss.into(), tensor: tensor.into(), error });
        Ok(())
    }
}

fn loss_checks(r: &mut Runner, rng: &mut ChaCha8Rng) -> Result<(), TensorError> {
    // Pushed away from the |x| = delta kink.
    let pred = rand_t(4, 5, rng).map(|v| if v.abs() > 0.5 { v * 3.0 } else { v });
    let truth = rand_t(4, 5, rng).map(|v| v * 0.01);
    r.check("huber", "pred", &pred, 1e-6, |tape, p| {
        let t = tape.constant(truth.clone());
        losses::huber_hierarchical(tape, &[p], &[t], 1.0).map_err(tens)
    })?;

    let (frames, batch, d) = (3, 2, 4);
    let audio: Vec<Tensor> = (0..3).map(|_| rand_t(frames * batch, d, rng)).collect();
    let text = rand_t(frames * batch, d, rng);
    r.check("contrastive", "text", &text, 1e-6, |tape, t| {
        let a = [tape.constant(audio[0].clone()), tape.constant(audio[1].clone()), tape.constant(audio[2].clone())];
        losses::contrastive_multilevel(tape, t, &a, frames, batch, 0.07).map_err(tens)
    })?;
    for (level, name) in ["audio_low", "audio_mid", "audio_high"].iter().enumerate() {
        r.check("contrastive", name, &audio[level], 1e-6, |tape, x| {
            let mut a = [tape.constant(audio[0].clone()), tape.constant(audio[1].clone()), tape.constant(audio[2].clone())];
            a[level] = x;
            let t = tape.constant(text.clone());
            losses::contrastive_multilevel(tape, t, &a, frames, batch, 0.07).map_err(tens)
        })?;
    }

    let probs = Tensor::new(vec![5, 1], vec![0.1, 0.3, 0.5, 0.7, 0.9]).expect("shape");
    let real = Tensor::new(vec![5, 1], vec![0.2, 0.4, 0.6, 0.8, 0.95]).expect("shape");
    r.check("gan", "d_fake", &probs, 1e-7, |tape, f| Ok(losses::gan_generator_loss(tape, f)))?;
    r.check("gan_disc", "d_fake", &probs, 1e-7, |tape, f| {
        let rv = tape.constant(real.clone());
        losses::gan_discriminator_loss(tape, rv, f).map_err(tens)
    })?;
    r.check("gan_disc", "d_real", &real, 1e-7, |tape, x| {
        let fv = tape.constant(probs.clone());
        losses::gan_discriminator_loss(tape, x, fv).map_err(tens)
    })?;

    let p2 = rand_t(6, 4, rng);
    let p1 = rand_t(6, 4, rng).map(|v| v * 0.4);
    let (i1, i2) = (rand_t(2, 3, rng), rand_t(2, 3, rng));
    r.check("style", "pose", &p1, 1e-6, |tape, p| {
        let (b, a, c) = (tape.constant(p2.clone()), tape.constant(i1.clone()), tape.constant(i2.clone()));
        losses::style_diverging(tape, p, b, a, c, 3, 2, 1000.0, 1.0).map_err(tens)
    })?;
    r.check("style", "identity", &i1, 1e-6, |tape, id| {
        let (a, b, c) = (tape.constant(p1.clone()), tape.constant(p2.clone()), tape.constant(i2.clone()));
        losses::style_diverging(tape, a, b, id, c, 3, 2, 1000.0, 1.0).map_err(tens)
    })?;

    let mu = rand_t(2, 5, rng);
    let lv = rand_t(2, 5, rng);
    r.check("kld", "mu", &mu, 1e-6, |tape, m| {
        let l = tape.constant(lv.clone());
        losses::kld_loss(tape, m, l).map_err(tens)
    })?;
    r.check("kld", "logvar", &lv, 1e-6, |tape, l| {
        let m = tape.constant(mu.clone());
        losses::kld_loss(tape, m, l).map_err(tens)
    })?;

    let profile = AngleProfile { means: vec![60.0, 100.0], variances: vec![30.0, 90.0] };
    let pose = rand_t(3, 9, rng);
    r.check("physical", "pose", &pose, 1e-6, |tape, p| {
        let a = losses::pose_angles(tape, p, &[(0, 1), (1, 2)]).map_err(tens)?;
        losses::physical_loss(tape, a, &profile).map_err(tens)
    })?;
    Ok(())
}

/// Probes `samples` coordinates of every trainable tensor in `store`.
fn param_checks(
    r: &mut Runner,
    loss: &str,
    store: &mut ParamStore,
    grads: &[Tensor],
    rng: &mut ChaCha8Rng,
    mut eval: impl FnMut(&ParamStore) -> Result<f64, TrainError>,
) -> Result<(), TrainError> {
    let sign = if r.opts.flip.as_deref() == Some(loss) { -1.0 } else { 1.0 };
    let eps = 1e-6;
    for (&id, g) in store.trainable_ids().iter().zip(grads) {
        let mut worst = 0.0f64;
        for _ in 0..r.opts.samples_per_tensor {
            let i = rng.random_range(0..g.len());
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max((sign * g.data()[i] - numeric).abs() / numeric.abs().max(1.0));
        }
        r.rows.push(GradRow { loss: loss.into(), tensor: store.name(id).to_string(), error: worst });
    }
    Ok(())
}

/// A small trainer with every loss switched on.
fn tiny_trainer(seed: u64) -> Result<(Trainer, Vec<PreparedClip>), SuiteError> {
    let skel = Skeleton::ted43();
    let model = ModelConfig { frames: 8, seed_frames: 2, hidden: 6, disc_hidden: 6, ..ModelConfig::desk() };
    let spec = SynthSpec { clips: 3, frames: model.frames, mel: model.mel.clone(), ..SynthSpec::default() };
    let synth = synth_corpus(&spec, &skel, seed)?;
    let clips: Vec<PreparedClip> = synth
        .iter()
        .map(|c| PreparedClip::from_audio(&c.audio, &model.mel, &c.record.tokens, c.record.speaker, &c.pose))
        .collect::<Result<_, _>>()?;
    let n = skel.angle_pairs().len();
    let profile = AngleProfile { means: vec![90.0; n], variances: vec![400.0; n] };
    let trainer = Trainer::new(&model, &skel, LossWeights::default(), TrainConfig::default(), profile, seed)?;
    Ok((trainer, clips))
}

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()).expect("shape")
}

/// Runs every check. Rows come back in suite order.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<GradRow>, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut r = Runner { opts, rows: Vec::new() };
    loss_checks(&mut r, &mut rng)?;

    let (mut trainer, clips) = tiny_trainer(opts.seed)?;
    let refs: Vec<&PreparedClip> = clips.iter().collect();
    let style_dim = trainer.gen.cfg.style_dim;
    let noise = normal(refs.len(), style_dim, &mut rng);
    let id2 = normal(refs.len(), style_dim, &mut rng);
    let (_, _, grads) = trainer.generator_objective(&refs, &noise, &id2, true)?;
    let mut store = trainer.gen.store.clone();
    param_checks(&mut r, "total", &mut store, &grads, &mut rng, |s| {
        trainer.gen.store = s.clone();
        Ok(trainer.generator_objective(&refs, &noise, &id2, true)?.0)
    })?;

    let frames = trainer.gen.cfg.frames;
    let d = *trainer.gen.dims.last().expect("levels");
    let b = refs.len();
    let real = rand_t(frames * b, d, &mut rng);
    let fake = rand_t(frames * b, d, &mut rng);
    let (_, grads) = trainer.discriminator_objective(&real, &fake, b)?;
    let mut store = trainer.disc.store.clone();
    param_checks(&mut r, "discriminator", &mut store, &grads, &mut rng, |s| {
        trainer.disc.store = s.clone();
        Ok(trainer.discriminator_objective(&real, &fake, b)?.0)
    })?;
    Ok(r.rows)
}

/// The worst row of each loss, in first-seen order.
pub fn worst_per_loss(rows: &[GradRow]) -> Vec<GradRow> {
    let mut out: Vec<GradRow> = Vec::new();
    for row in rows {
        match out.iter_mut().find(|w| w.loss == row.loss) {
            Some(w) if row.error > w.error => *w = row.clone(),
            Some(_) => {}
            None => out.push(row.clone()),
        }
    }
    out
}
