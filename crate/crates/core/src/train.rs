//! Adversarial training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::losses::{self, LossComponents, LossError, LossWeights};
use crate::model::checkpoint::{self, CheckpointError};
use crate::model::{shift_frames, Batch, Discriminator, Feedback, Generator, Identity, ModelConfig, ModelError, PreparedClip};
use crate::nn::{Ctx, ParamStore};
use crate::pose::{AngleProfile, Skeleton};
use crate::tensor::{Adam, AdamState, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (batch {batch_id}): {components:?}")]
    NonFiniteLoss { step: u64, batch_id: usize, components: LossComponents },
    #[error("need at least 2 clips per batch, got {0}")]
    BatchTooSmall(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Optimisation schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Clips per gradient shard; contrastive negatives come from the same shard.
    pub micro_batch: usize,
    pub lr: f64,
    pub lr_disc: f64,
    /// Evaluate the style-diverging term every this many steps, weighted by
    /// the interval so its expected contribution is unchanged (0 disables it).
    pub style_every: u64,
    /// Clips used to refresh batch-norm statistics at each epoch start.
    pub calibration_clips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 32, micro_batch: 32, lr: 1e-4, lr_disc: 1e-4, style_every: 1, calibration_clips: 128 }
    }
}

/// Loss values of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub components: LossComponents,
    pub total: f64,
    pub disc: f64,
}

/// Generator, discriminator and their optimiser states.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub gen: Generator,
    pub disc: Discriminator,
    pub weights: LossWeights,
    pub cfg: TrainConfig,
    pub profile: AngleProfile,
    pub angle_pairs: Vec<(usize, usize)>,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub step: u64,
    pub epoch: usize,
    last_style: f64,
    rng: ChaCha8Rng,
}

struct Shard {
    components: LossComponents,
    total: f64,
    grads: Vec<Tensor>,
    fake: Tensor,
}

fn normal_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

fn split(batch: &[&PreparedClip], micro: usize) -> Vec<Vec<usize>> {
    let n = batch.len();
    let shards = n.div_ceil(micro.max(2)).max(1);
    // Even sizes so no shard is left with a single clip.
    (0..shards).map(|s| (s * n / shards..(s + 1) * n / shards).collect()).collect()
}

fn apply_adam(adam: &Adam, state: &mut AdamState, store: &mut ParamStore, grads: &[Tensor]) {
    let ids = store.trainable_ids();
    let mut params: Vec<Tensor> = ids.iter().map(|&id| std::mem::replace(store.get_mut(id), Tensor::scalar(0.0))).collect();
    adam.step(state, &mut params, grads);
    for (id, p) in ids.into_iter().zip(params) {
        *store.get_mut(id) = p;
    }
}

impl Trainer {
    pub fn new(model: &ModelConfig, skeleton: &Skeleton, weights: LossWeights, cfg: TrainConfig, profile: AngleProfile, seed: u64) -> Result<Self, TrainError> {
        weights.validate()?;
        let gen = Generator::new(model, skeleton.hierarchy(), seed)?;
        let disc = Discriminator::new(model, *gen.dims.last().expect("levels"), seed.wrapping_add(1))?;
        if profile.len() != skeleton.angle_pairs().len() {
            return Err(LossError::DimMismatch(format!("profile has {} angles, skeleton {}", profile.len(), skeleton.angle_pairs().len())).into());
        }
        Ok(Self {
            gen,
            disc,
            weights,
            cfg,
            profile,
            angle_pairs: skeleton.angle_pairs().to_vec(),
            adam_g: AdamState::default(),
            adam_d: AdamState::default(),
            step: 0,
            epoch: 0,
            last_style: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(2)),
        })
    }

    /// Recomputes every batch-norm buffer from `clips`: the generator on its
    /// own inputs, the discriminator on real and generated poses together.
    pub fn calibrate(&mut self, clips: &[&PreparedClip]) -> Result<(), TrainError> {
        let batch = Batch::new(&self.gen.cfg, &self.gen.dims, clips)?;
        let mut tape = Tape::new();
        let bound = self.gen.store.bind(&mut tape, false);
        let ctx = Ctx::calibrating(&bound);
        let out = self.gen.forward(&ctx, &mut tape, &batch, Identity::Speakers { ids: &batch.speakers, noise: None }, self.teacher(&batch).as_ref().map_or(Feedback::Off, |f| Feedback::Frames(f)))?;
        ctx.commit(&mut self.gen.store);
        let fake = tape.value(out.output).clone();

        let mut tape = Tape::new();
        let bound = self.disc.store.bind(&mut tape, false);
        let ctx = Ctx::calibrating(&bound);
        let real = tape.constant(batch.truth.last().expect("levels").clone());
        let fake = tape.constant(fake);
        let both = to_clip_pairs(&mut tape, real, fake, batch.frames, batch.size)?;
        self.disc.forward(&ctx, &mut tape, both, 2 * batch.size)?;
        ctx.commit(&mut self.disc.store);
        Ok(())
    }

    fn teacher(&self, batch: &Batch) -> Option<Vec<Tensor>> {
        self.gen.cfg.autoregressive.then(|| batch.truth.iter().map(|t| shift_frames(t, batch.size)).collect())
    }

    fn generator_shard(&self, batch: &Batch, noise: &Tensor, id2: &Tensor, with_style: bool) -> Result<Shard, TrainError> {
        let w = &self.weights;
        let (n, b) = (batch.frames, batch.size);
        let mut tape = Tape::new();
        let bound = self.gen.store.bind(&mut tape, true);
        let ctx = Ctx::new(&bound);
        let teacher = self.teacher(batch);
        let feedback = teacher.as_ref().map_or(Feedback::Off, |f| Feedback::Frames(f));
        let out = self.gen.forward(&ctx, &mut tape, batch, Identity::Speakers { ids: &batch.speakers, noise: Some(noise) }, feedback)?;

        let truth: Vec<Var> = batch.truth.iter().map(|t| tape.constant(t.clone())).collect();
        let mut terms: Vec<(f64, Var)> = Vec::new();
        let mut c = LossComponents::default();
        let huber = losses::huber_hierarchical(&mut tape, &out.levels, &truth, w.huber_delta)?;
        terms.push((w.lambda_h, huber));
        if w.lambda_gan > 0.0 {
            let dbound = self.disc.store.bind(&mut tape, false);
            let p = self.disc.forward(&Ctx::new(&dbound), &mut tape, out.output, b)?;
            let g = losses::gan_generator_loss(&mut tape, p);
            terms.push((w.lambda_gan, g));
            c.gan = tape.value(g).item();
        }
        if w.lambda_c > 0.0 {
            let text = self.gen.text.forward(&ctx, &mut tape, &batch.tokens, b)?;
            let l = losses::contrastive_multilevel(&mut tape, text, &out.feats, n, b, w.tau)?;
            terms.push((w.lambda_c, l));
            c.contrastive = tape.value(l).item();
        }
        if w.lambda_k > 0.0 {
            if let (Some(mu), Some(lv)) = (out.style.mu, out.style.logvar) {
                let l = losses::kld_loss(&mut tape, mu, lv)?;
                terms.push((w.lambda_k, l));
                c.kld = tape.value(l).item();
            }
        }
        if w.lambda_p > 0.0 {
            let angles = losses::pose_angles(&mut tape, out.output, &self.angle_pairs)?;
            let l = losses::physical_loss(&mut tape, angles, &self.profile)?;
            terms.push((w.lambda_p, l));
            c.physical = tape.value(l).item();
        }
        if with_style && w.lambda_s > 0.0 {
            let style2 = self.gen.style.forward(&ctx, &mut tape, Identity::Raw(id2))?;
            let out2 = self.gen.decode(&ctx, &mut tape, batch, out.feats, style2, feedback)?;
            let l = losses::style_diverging(&mut tape, out.output, out2.output, out.style.f_id, style2.f_id, n, b, w.epsilon_clip, w.huber_delta)?;
            terms.push((w.lambda_s * self.cfg.style_every as f64, l));
            c.style = tape.value(l).item();
        }
        c.huber = tape.value(huber).item();
        let mut total = None;
        for (lambda, v) in terms {
            let s = tape.scale(v, lambda);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
        let total = total.expect("huber term");
        let value = tape.value(total).item();
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: self.step, batch_id: 0, components: c });
        }
        let mut grads = tape.backward(total)?;
        let ids = self.gen.store.trainable_ids();
        let grads = ids.iter().map(|&id| grads.take(bound.var(id))).collect();
        Ok(Shard { components: c, total: value, grads, fake: tape.value(out.output).clone() })
    }

    fn discriminator_shard(&self, real: &Tensor, fake: &Tensor, batch: usize) -> Result<(f64, Vec<Tensor>), TrainError> {
        let mut tape = Tape::new();
        let bound = self.disc.store.bind(&mut tape, true);
        let ctx = Ctx::new(&bound);
        let r = tape.constant(real.clone());
        let f = tape.constant(fake.clone());
        let pr = self.disc.forward(&ctx, &mut tape, r, batch)?;
        let pf = self.disc.forward(&ctx, &mut tape, f, batch)?;
        let loss = losses::gan_discriminator_loss(&mut tape, pr, pf)?;
        let v = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let ids = self.disc.store.trainable_ids();
        Ok((v, ids.iter().map(|&id| grads.take(bound.var(id))).collect()))
    }

    /// Weighted generator objective on one micro-batch and its gradient for
    /// every trainable generator parameter. The style term, when included,
    /// carries the same interval weight as in training.
    pub fn generator_objective(
        &self,
        clips: &[&PreparedClip],
        noise: &Tensor,
        id2: &Tensor,
        with_style: bool,
    ) -> Result<(f64, LossComponents, Vec<Tensor>), TrainError> {
        let batch = Batch::new(&self.gen.cfg, &self.gen.dims, clips)?;
        let s = self.generator_shard(&batch, noise, id2, with_style)?;
        Ok((s.total, s.components, s.grads))
    }

    /// Discriminator loss on real versus fake final-level poses and its
    /// gradient for every trainable discriminator parameter.
    pub fn discriminator_objective(&self, real: &Tensor, fake: &Tensor, batch: usize) -> Result<(f64, Vec<Tensor>), TrainError> {
        self.discriminator_shard(real, fake, batch)
    }

    /// One generator update on the weighted objective, then one
    /// discriminator update on real versus the generated poses.
    pub fn train_step(&mut self, clips: &[&PreparedClip], batch_id: usize) -> Result<StepRecord, TrainError> {
        if clips.len() < 2 {
            return Err(TrainError::BatchTooSmall(clips.len()));
        }
        let style_dim = self.gen.cfg.style_dim;
        let with_style = self.cfg.style_every > 0 && self.step % self.cfg.style_every == 0;
        let shards: Vec<(Batch, Tensor, Tensor)> = split(clips, self.cfg.micro_batch)
            .into_iter()
            .map(|idx| {
                let sub: Vec<&PreparedClip> = idx.iter().map(|&i| clips[i]).collect();
                let batch = Batch::new(&self.gen.cfg, &self.gen.dims, &sub)?;
                let noise = normal_tensor(sub.len(), style_dim, &mut self.rng);
                let id2 = normal_tensor(sub.len(), style_dim, &mut self.rng);
                Ok((batch, noise, id2))
            })
            .collect::<Result<_, TrainError>>()?;

        let results: Vec<Shard> = shards
            .par_iter()
            .map(|(b, noise, id2)| self.generator_shard(b, noise, id2, with_style))
            .collect::<Result<_, _>>()
            .map_err(|e| match e {
                TrainError::NonFiniteLoss { step, components, .. } => TrainError::NonFiniteLoss { step, batch_id, components },
                e => e,
            })?;
        let k = results.len() as f64;
        let mut comps = LossComponents::default();
        let mut g_sum: Vec<Tensor> = results[0].grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
        for r in &results {
            let (a, b) = (comps.values(), r.components.values());
            let v: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y / k).collect();
            comps = LossComponents { gan: v[0], huber: v[1], physical: v[2], style: v[3], kld: v[4], contrastive: v[5] };
            for (s, g) in g_sum.iter_mut().zip(&r.grads) {
                s.data_mut().iter_mut().zip(g.data()).for_each(|(s, g)| *s += g / k);
            }
        }
        // Steps that skip the style term report its most recent value.
        if with_style {
            self.last_style = comps.style;
        } else {
            comps.style = self.last_style;
        }
        let total = losses::total_loss(&comps, &self.weights)?;
        apply_adam(&Adam::new(self.cfg.lr), &mut self.adam_g, &mut self.gen.store, &g_sum);

        let mut disc = 0.0;
        if self.weights.lambda_gan > 0.0 {
            let d_results: Vec<(f64, Vec<Tensor>)> = shards
                .par_iter()
                .zip(&results)
                .map(|((b, _, _), r)| self.discriminator_shard(b.truth.last().expect("levels"), &r.fake, b.size))
                .collect::<Result<_, _>>()?;
            let mut d_sum: Vec<Tensor> = d_results[0].1.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
            for (v, grads) in &d_results {
                disc += v / k;
                for (s, g) in d_sum.iter_mut().zip(grads) {
                    s.data_mut().iter_mut().zip(g.data()).for_each(|(s, g)| *s += g / k);
                }
            }
            apply_adam(&Adam::new(self.cfg.lr_disc), &mut self.adam_d, &mut self.disc.store, &d_sum);
        }
        self.step += 1;
        Ok(StepRecord { step: self.step, epoch: self.epoch, components: comps, total, disc })
    }

    /// One pass over `clips` in shuffled batches, after refreshing the
    /// batch-norm statistics. Calls `on_step` after every step.
    pub fn train_epoch(&mut self, clips: &[PreparedClip], mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>, TrainError> {
        let calib: Vec<&PreparedClip> = clips.iter().take(self.cfg.calibration_clips.max(2)).collect();
        self.calibrate(&calib)?;
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut self.rng);
        let mut records = Vec::new();
        for (i, chunk) in order.chunks(self.cfg.batch_size.max(2)).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&PreparedClip> = chunk.iter().map(|&j| &clips[j]).collect();
            let rec = self.train_step(&batch, i)?;
            on_step(&rec);
            records.push(rec);
        }
        self.epoch += 1;
        Ok(records)
    }

    /// Everything needed to resume training: both networks, both optimiser
    /// states, the step counters and the random stream position.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = checkpoint::store_tensors(&self.gen.store, GEN_PREFIX);
        out.extend(checkpoint::store_tensors(&self.disc.store, DISC_PREFIX));
        for (name, st) in [("adam_g", &self.adam_g), ("adam_d", &self.adam_d)] {
            for (i, (m, v)) in st.m.iter().zip(&st.v).enumerate() {
                out.push((format!("{name}.m.{i}"), m.clone()));
                out.push((format!("{name}.v.{i}"), v.clone()));
            }
        }
        let mut words = Vec::new();
        for v in [self.step, self.epoch as u64, self.adam_g.t, self.adam_d.t, self.rng.get_stream()] {
            words.extend(split_u64(v));
        }
        let pos = self.rng.get_word_pos();
        words.extend(split_u64((pos >> 64) as u64));
        words.extend(split_u64(pos as u64));
        for chunk in self.rng.get_seed().chunks(8) {
            words.extend(split_u64(u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"))));
        }
        out.push(("trainer.counters".into(), Tensor::vector(words)));
        out.push(("trainer.last_style".into(), Tensor::scalar(self.last_style)));
        out
    }

    /// Inverse of [`Trainer::state_tensors`] for a trainer built with the same
    /// configuration.
    pub fn restore(&mut self, tensors: &[(String, Tensor)]) -> Result<(), CheckpointError> {
        checkpoint::load_store(&mut self.gen.store, tensors, GEN_PREFIX)?;
        checkpoint::load_store(&mut self.disc.store, tensors, DISC_PREFIX)?;
        let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        for (name, st, store) in [("adam_g", &mut self.adam_g, &self.gen.store), ("adam_d", &mut self.adam_d, &self.disc.store)] {
            let ids = store.trainable_ids();
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for (i, &id) in ids.iter().enumerate() {
                match (find(&format!("{name}.m.{i}")), find(&format!("{name}.v.{i}"))) {
                    (Some(a), Some(b)) if a.shape() == store.get(id).shape() && b.shape() == a.shape() => {
                        m.push(a.clone());
                        v.push(b.clone());
                    }
                    (None, None) if i == 0 => break,
                    _ => return Err(CheckpointError::MissingTensor(format!("{name}.m.{i}"))),
                }
            }
            *st = AdamState { m, v, t: 0 };
        }
        let words = find("trainer.counters").ok_or_else(|| CheckpointError::MissingTensor("trainer.counters".into()))?;
        if words.len() != 4 * 11 {
            return Err(CheckpointError::Corrupt(format!("trainer.counters has {} values", words.len())));
        }
        let mut vals = words.data().chunks(4).map(join_u64);
        let mut next = || vals.next().expect("11 words");
        self.step = next();
        self.epoch = next() as usize;
        self.adam_g.t = next();
        self.adam_d.t = next();
        let stream = next();
        let pos = ((next() as u128) << 64) | next() as u128;
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_mut(8) {
            chunk.copy_from_slice(&next().to_le_bytes());
        }
        self.rng = ChaCha8Rng::from_seed(seed);
        self.rng.set_stream(stream);
        self.rng.set_word_pos(pos);
        self.last_style = find("trainer.last_style").map_or(0.0, |t| t.item());
        Ok(())
    }

    /// Generated final-level poses, one time-major `N x D` array per clip,
    /// using each clip's speaker mean embedding.
    pub fn generate(&self, clips: &[&PreparedClip]) -> Result<Vec<Vec<f64>>, TrainError> {
        generate_clips(&self.gen, clips)
    }
}

/// Runs the generator on clips in chunks and splits the output per clip.
pub fn generate_clips(gen: &Generator, clips: &[&PreparedClip]) -> Result<Vec<Vec<f64>>, TrainError> {
    generate_styled(gen, clips, None)
}

/// Like [`generate_clips`], but with `Some(seed)` each clip's style is a
/// sample from its speaker's distribution instead of the mean. Noise is
/// drawn per clip, so results do not depend on chunking.
pub fn generate_styled(gen: &Generator, clips: &[&PreparedClip], style_seed: Option<u64>) -> Result<Vec<Vec<f64>>, TrainError> {
    let dim = gen.cfg.style_dim;
    let noise: Option<Vec<f64>> = style_seed.map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..clips.len() * dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    });
    let chunks: Vec<Vec<Vec<f64>>> = clips
        .par_chunks(64)
        .enumerate()
        .map(|(c, chunk)| -> Result<Vec<Vec<f64>>, TrainError> {
            let batch = Batch::new(&gen.cfg, &gen.dims, chunk)?;
            let eps = noise.as_ref().map(|n| {
                let start = c * 64 * dim;
                Tensor::new(vec![chunk.len(), dim], n[start..start + chunk.len() * dim].to_vec()).expect("shape matches")
            });
            let out = gen.generate(&batch, Identity::Speakers { ids: &batch.speakers, noise: eps.as_ref() })?;
            Ok(split_time_major(&out, batch.frames, batch.size))
        })
        .collect::<Result<_, _>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub const GEN_PREFIX: &str = "gen.";
pub const DISC_PREFIX: &str = "";

// 16-bit pieces survive an f32 checkpoint exactly.
fn split_u64(v: u64) -> [f64; 4] {
    std::array::from_fn(|i| ((v >> (16 * i)) & 0xffff) as f64)
}

fn join_u64(w: &[f64]) -> u64 {
    w.iter().enumerate().map(|(i, &x)| (x as u64 & 0xffff) << (16 * i)).sum()
}

/// `[N * B, D]` time-major rows to `B` clip-major `N x D` arrays.
pub fn split_time_major(t: &Tensor, frames: usize, batch: usize) -> Vec<Vec<f64>> {
    let d = t.last_dim();
    (0..batch)
        .map(|b| (0..frames).flat_map(|f| t.data()[(f * batch + b) * d..(f * batch + b + 1) * d].iter().copied()).collect())
        .collect()
}

/// Stacks two time-major batches into one of `2B` clips.
fn to_clip_pairs(tape: &mut Tape, a: Var, b: Var, frames: usize, batch: usize) -> Result<Var, TensorError> {
    let d = tape.value(a).last_dim();
    let a3 = tape.reshape(a, &[frames, batch, d])?;
    let b3 = tape.reshape(b, &[frames, batch, d])?;
    let both = tape.concat(&[a3, b3], 1)?;
    tape.reshape(both, &[frames * 2 * batch, d])
}
