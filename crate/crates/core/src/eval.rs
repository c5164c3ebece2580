//! Corpus-level evaluation built on the metrics module.

use crate::data::{mel_spectrogram, DataError, MelConfig};
use crate::metrics::{
    angle_change_rate, beat_consistency, detect_audio_beats, detect_motion_beats, maac, onset_strength, BeatSet, FrameTiming,
    MaacProfile, MetricsError, PeakPicking,
};
use crate::pose::{bone_angles, PoseSequence, Skeleton};

/// Beat-consistency settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeatConfig {
    pub threshold: f64,
    pub sigma: f64,
    pub picking: PeakPicking,
}

impl Default for BeatConfig {
    fn default() -> Self {
        Self { threshold: 0.05, sigma: 0.1, picking: PeakPicking::default() }
    }
}

/// Onset-based audio beats of a clip's waveform.
pub fn audio_beats(audio: &[f64], mel: &MelConfig, picking: PeakPicking) -> Result<BeatSet, DataError> {
    let spec = mel_spectrogram(audio, mel)?;
    Ok(detect_audio_beats(&onset_strength(&spec), FrameTiming::of_mel(mel), picking))
}

/// MAAC over the joint angles of a set of pose clips.
pub fn corpus_maac(poses: &[PoseSequence], skeleton: &Skeleton) -> Result<MaacProfile, MetricsError> {
    let angles: Vec<Vec<Vec<f64>>> = poses.iter().map(|p| bone_angles(p, skeleton)).collect();
    maac(&angles)
}

/// Kinematic beats of one clip, normalised by `profile`.
pub fn motion_beats(pose: &PoseSequence, skeleton: &Skeleton, profile: &MaacProfile, threshold: f64) -> BeatSet {
    let rate = angle_change_rate(&bone_angles(pose, skeleton), profile);
    detect_motion_beats(&rate, threshold, pose.fps)
}

/// Beat consistency of one clip. `None` when the audio has no beats; a
/// clip without motion beats scores 0.
pub fn clip_bc(motion: &BeatSet, audio: &BeatSet, sigma: f64) -> Option<f64> {
    match beat_consistency(motion, audio, sigma) {
        Ok(v) => Some(v),
        Err(_) if audio.is_empty() => None,
        Err(_) => Some(0.0),
    }
}

/// Per-clip scores and their mean over clips that have audio beats.
#[derive(Clone, Debug, PartialEq)]
pub struct BcReport {
    pub per_clip: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn corpus_bc(
    poses: &[PoseSequence],
    audio: &[BeatSet],
    skeleton: &Skeleton,
    profile: &MaacProfile,
    cfg: &BeatConfig,
) -> Result<BcReport, MetricsError> {
    if poses.len() != audio.len() {
        return Err(MetricsError::DimMismatch(format!("{} pose clips vs {} audio clips", poses.len(), audio.len())));
    }
    let per_clip: Vec<Option<f64>> =
        poses.iter().zip(audio).map(|(p, a)| clip_bc(&motion_beats(p, skeleton, profile, cfg.threshold), a, cfg.sigma)).collect();
    let scored: Vec<f64> = per_clip.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(MetricsError::EmptyBeats);
    }
    let mean = scored.iter().sum::<f64>() / scored.len() as f64;
    Ok(BcReport { per_clip, mean })
}
