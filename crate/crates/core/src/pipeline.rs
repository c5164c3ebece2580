//! Corpus loading, training setup and corpus-level evaluation shared by the
//! command-line tool, the benches and the end-to-end tests.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::config::RunConfig;
use crate::data::{load_clips, read_wav, save_clips, write_wav, ClipRecord, DataError, MelConfig, SynthClip};
use crate::eval::{audio_beats, corpus_bc, corpus_maac, BcReport};
use crate::metrics::{diversity, fgd, AutoencoderReport, AutoencoderTraining, BeatSet, MaacProfile, MetricsError, PoseAutoencoder};
use crate::model::checkpoint::{self, CheckpointError, Dtype};
use crate::model::{Generator, ModelConfig, ModelError, PreparedClip};
use crate::pose::{angle_statistics, bone_angles, joints_to_dirvecs, AngleProfile, PoseError, PoseSequence, Skeleton};
use crate::tensor::Tensor;
use crate::train::{generate_styled, TrainError, Trainer, GEN_PREFIX};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("clip {clip}: {reason}")]
    BadClip { clip: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, PipelineError>;

/// A clip with its decoded audio and direction-vector poses.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub pose: PoseSequence,
    pub audio: Vec<f64>,
    pub tokens: Vec<u32>,
    pub speaker: usize,
}

impl From<&SynthClip> for Clip {
    fn from(c: &SynthClip) -> Self {
        Self { id: c.record.clip_id.clone(), pose: c.pose.clone(), audio: c.audio.clone(), tokens: c.record.tokens.clone(), speaker: c.record.speaker }
    }
}

fn record_pose(rec: &ClipRecord, skeleton: &Skeleton) -> Result<PoseSequence> {
    let bad = |reason: String| PipelineError::BadClip { clip: rec.clip_id.clone(), reason };
    if let Some(d) = &rec.dirvecs {
        if d.shape.len() != 3 || d.shape[2] != 3 || d.shape[1] != skeleton.bone_count() {
            return Err(bad(format!("dirvecs shape {:?}, expected [frames, {}, 3]", d.shape, skeleton.bone_count())));
        }
        Ok(PoseSequence::new(d.shape[0], d.shape[1], d.data.clone(), rec.fps)?)
    } else if let Some(j) = &rec.joints {
        if j.shape.len() != 3 || j.shape[2] != 3 {
            return Err(bad(format!("joints shape {:?}, expected [frames, joints, 3]", j.shape)));
        }
        Ok(joints_to_dirvecs(&j.data, j.shape[0], skeleton, rec.fps)?)
    } else {
        Err(bad("no dirvecs or joints payload".into()))
    }
}

/// Reads a JSON-Lines corpus. Audio paths are relative to the corpus file.
pub fn load_corpus(path: impl AsRef<Path>, skeleton: &Skeleton) -> Result<Vec<Clip>> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new("."));
    let records = load_clips(path)?;
    records
        .par_iter()
        .map(|rec| {
            let pose = record_pose(rec, skeleton)?;
            let audio = read_wav(dir.join(&rec.audio))?;
            Ok(Clip { id: rec.clip_id.clone(), pose, audio, tokens: rec.tokens.clone(), speaker: rec.speaker })
        })
        .collect()
}

pub const CORPUS_FILE: &str = "corpus.jsonl";

/// Writes `dir/corpus.jsonl` and the referenced WAV files. `dir` must exist.
pub fn write_synth_corpus(dir: impl AsRef<Path>, clips: &[SynthClip], sample_rate: u32) -> Result<PathBuf> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(PipelineError::Invalid(format!("output directory {} does not exist", dir.display())));
    }
    clips.par_iter().try_for_each(|c| -> Result<()> {
        let wav = dir.join(&c.record.audio);
        if let Some(parent) = wav.parent() {
            fs::create_dir_all(parent).map_err(DataError::Io)?;
        }
        Ok(write_wav(wav, &c.audio, sample_rate)?)
    })?;
    let records: Vec<ClipRecord> = clips.iter().map(|c| c.record.clone()).collect();
    let path = dir.join(CORPUS_FILE);
    save_clips(&records, &path)?;
    Ok(path)
}

/// The skeleton whose hierarchy has `levels` levels: the full one or a
/// single holistic level.
pub fn level_skeleton(skeleton: &Skeleton, levels: usize) -> Result<Skeleton> {
    let depth = skeleton.hierarchy().depth();
    match levels {
        l if l == depth => Ok(skeleton.clone()),
        1 => Ok(skeleton.holistic()),
        l => Err(PipelineError::Invalid(format!("levels must be 1 or {depth}, got {l}"))),
    }
}

/// Network inputs for every clip, in parallel.
pub fn prepare(clips: &[Clip], model: &ModelConfig) -> Result<Vec<PreparedClip>> {
    clips
        .par_iter()
        .map(|c| {
            if c.pose.frames() != model.frames {
                return Err(PipelineError::BadClip { clip: c.id.clone(), reason: format!("{} frames, model expects {}", c.pose.frames(), model.frames) });
            }
            Ok(PreparedClip::from_audio(&c.audio, &model.mel, &c.tokens, c.speaker, &c.pose)?)
        })
        .collect()
}

pub fn angle_profile(clips: &[Clip], skeleton: &Skeleton) -> Result<AngleProfile> {
    let angles: Vec<Vec<Vec<f64>>> = clips.iter().map(|c| bone_angles(&c.pose, skeleton)).collect();
    Ok(angle_statistics(angles.iter().map(|a| a.as_slice()))?)
}

/// Number of clips held out for evaluation: a tenth, at least one.
pub fn holdout_count(n: usize) -> usize {
    (n / 10).max(1).min(n.saturating_sub(2))
}

/// Trainer for `cfg`, with the angle profile of `train` and batch-norm
/// statistics calibrated on its first clips.
pub fn new_trainer(cfg: &RunConfig, skeleton: &Skeleton, train: &[Clip], prepared: &[PreparedClip]) -> Result<Trainer> {
    let skel = level_skeleton(skeleton, cfg.levels)?;
    let profile = angle_profile(train, skeleton)?;
    let mut trainer = Trainer::new(&cfg.model, &skel, cfg.weights.clone(), cfg.train.clone(), profile, cfg.seed)?;
    let calib: Vec<&PreparedClip> = prepared.iter().take(cfg.train.calibration_clips.max(2)).collect();
    trainer.calibrate(&calib)?;
    Ok(trainer)
}

/// Generator restored from a checkpoint written by [`save_checkpoint`] (or
/// holding only `gen.`-prefixed tensors).
pub fn load_generator(cfg: &RunConfig, skeleton: &Skeleton, path: impl AsRef<Path>) -> Result<Generator> {
    let skel = level_skeleton(skeleton, cfg.levels)?;
    let mut gen = Generator::new(&cfg.model, skel.hierarchy(), cfg.seed)?;
    let tensors = read_checkpoint(path)?;
    checkpoint::load_store(&mut gen.store, &tensors, GEN_PREFIX)?;
    Ok(gen)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let file = fs::File::open(path.as_ref()).map_err(DataError::Io)?;
    Ok(checkpoint::read_tensors(std::io::BufReader::new(file))?)
}

pub fn save_checkpoint(trainer: &Trainer, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let file = fs::File::create(path.as_ref()).map_err(DataError::Io)?;
    let mut w = std::io::BufWriter::new(file);
    checkpoint::write_tensors(&mut w, &trainer.state_tensors(), dtype)?;
    std::io::Write::flush(&mut w).map_err(DataError::Io)?;
    Ok(())
}

/// Generated poses for `clips`; see [`generate_styled`] for `style_seed`.
pub fn generate_poses(gen: &Generator, clips: &[PreparedClip], fps: f64, style_seed: Option<u64>) -> Result<Vec<PoseSequence>> {
    let refs: Vec<&PreparedClip> = clips.iter().collect();
    let bones = gen.dims.last().copied().unwrap_or(0) / 3;
    generate_styled(gen, &refs, style_seed)?
        .into_iter()
        .map(|d| Ok(PoseSequence::new(gen.cfg.frames, bones, d, fps)?))
        .collect()
}

/// Clip count the diversity protocol samples from; fewer still evaluate.
pub const DIVERSITY_MIN_CLIPS: usize = 60;

/// FGD, BC and diversity of a set of generated clips.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fgd: f64,
    pub bc: BcReport,
    pub diversity: f64,
}

/// Fixed evaluation context: a trained pose autoencoder, the reference
/// latents, per-clip audio beats and the MAAC normaliser.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub skeleton: Skeleton,
    pub autoencoder: PoseAutoencoder,
    pub ae_report: AutoencoderReport,
    pub maac: MaacProfile,
    pub audio_beats: Vec<BeatSet>,
    real_latents: Vec<Vec<f64>>,
    cfg: RunConfig,
}

impl Evaluator {
    /// Trains the autoencoder on `ae_poses`; `reference` supplies the real
    /// latents and the audio of the evaluated clips.
    pub fn new(cfg: &RunConfig, skeleton: &Skeleton, ae_poses: &[PoseSequence], reference: &[Clip], maac: MaacProfile) -> Result<Self> {
        let first = reference.first().ok_or_else(|| PipelineError::Invalid("empty evaluation corpus".into()))?;
        let frames = first.pose.frames();
        let mut autoencoder = PoseAutoencoder::new(frames, first.pose.bones() * 3, cfg.seed)?;
        let train: Vec<&[f64]> = ae_poses.iter().map(|p| p.data()).collect();
        let ae_report = autoencoder.train(&train, &AutoencoderTraining { epochs: cfg.ae_epochs, seed: cfg.seed, ..Default::default() })?;
        let real: Vec<&[f64]> = reference.iter().map(|c| c.pose.data()).collect();
        let real_latents = autoencoder.encode(&real)?;
        let mel = MelConfig::default();
        let audio_beats = reference
            .par_iter()
            .map(|c| audio_beats(&c.audio, &mel, cfg.beats.picking))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { skeleton: skeleton.clone(), autoencoder, ae_report, maac, audio_beats, real_latents, cfg: cfg.clone() })
    }

    /// MAAC of ground-truth poses, the usual normaliser.
    pub fn maac_of(poses: &[PoseSequence], skeleton: &Skeleton) -> Result<MaacProfile> {
        Ok(corpus_maac(poses, skeleton)?)
    }

    pub fn latents(&self, poses: &[PoseSequence]) -> Result<Vec<Vec<f64>>> {
        let clips: Vec<&[f64]> = poses.iter().map(|p| p.data()).collect();
        Ok(self.autoencoder.encode(&clips)?)
    }

    pub fn fgd(&self, poses: &[PoseSequence]) -> Result<f64> {
        Ok(fgd(&self.real_latents, &self.latents(poses)?)?)
    }

    pub fn bc(&self, poses: &[PoseSequence]) -> Result<BcReport> {
        Ok(corpus_bc(poses, &self.audio_beats, &self.skeleton, &self.maac, &self.cfg.beats)?)
    }

    pub fn diversity(&self, poses: &[PoseSequence], seed: u64) -> Result<f64> {
        if poses.len() < DIVERSITY_MIN_CLIPS {
            log::warn!("diversity over {} clips; the metric expects at least {DIVERSITY_MIN_CLIPS}", poses.len());
        }
        Ok(diversity(&self.latents(poses)?, self.cfg.diversity_pairs, seed)?)
    }

    /// All three metrics; `poses` align with the reference clips.
    pub fn evaluate(&self, poses: &[PoseSequence]) -> Result<EvalReport> {
        if poses.len() != self.real_latents.len() {
            return Err(PipelineError::Invalid(format!("{} generated clips for {} reference clips", poses.len(), self.real_latents.len())));
        }
        Ok(EvalReport { fgd: self.fgd(poses)?, bc: self.bc(poses)?, diversity: self.diversity(poses, self.cfg.seed)? })
    }
}
