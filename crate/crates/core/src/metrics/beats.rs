use super::MetricsError;
use crate::data::{MelConfig, MelSpectrogram};

/// Mean absolute angle change of every angle over a set of clips.
#[derive(Clone, Debug, PartialEq)]
pub struct MaacProfile {
    pub values: Vec<f64>,
    pub clips: usize,
    pub frames: usize,
}

impl MaacProfile {
    /// Angles with zero MAAC carry no motion and are left out of the rate.
    pub fn included(&self) -> impl Iterator<Item = usize> + '_ {
        self.values.iter().enumerate().filter(|(_, v)| **v > 0.0).map(|(i, _)| i)
    }
}

/// Where the beats came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BeatSource {
    Motion,
    Audio,
}

/// Sorted beat timestamps in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct BeatSet {
    pub times: Vec<f64>,
    pub source: BeatSource,
}

impl BeatSet {
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }
}

/// MAAC per angle. Each clip is a `frames x angles` table in degrees.
pub fn maac(clips: &[Vec<Vec<f64>>]) -> Result<MaacProfile, MetricsError> {
    let first = clips.first().ok_or(MetricsError::TooShort)?;
    let frames = first.len();
    if frames < 2 {
        return Err(MetricsError::TooShort);
    }
    let angles = first[0].len();
    let mut sum = vec![0.0; angles];
    let mut steps = 0usize;
    for clip in clips {
        if clip.len() < 2 {
            return Err(MetricsError::TooShort);
        }
        for w in clip.windows(2) {
            if w[0].len() != angles || w[1].len() != angles {
                return Err(MetricsError::DimMismatch(format!("{} vs {} angles", w[1].len(), angles)));
            }
            for (s, (a, b)) in sum.iter_mut().zip(w[0].iter().zip(&w[1])) {
                *s += (b - a).abs();
            }
        }
        steps += clip.len() - 1;
    }
    // Equal-length clips make this S * (T - 1); ragged clips use the total step count.
    let values = sum.into_iter().map(|s| s / steps as f64).collect();
    Ok(MaacProfile { values, clips: clips.len(), frames })
}

/// Normalised angle change per frame step (length `T - 1`).
pub fn angle_change_rate(clip: &[Vec<f64>], profile: &MaacProfile) -> Vec<f64> {
    let included: Vec<usize> = profile.included().collect();
    if included.is_empty() {
        return vec![0.0; clip.len().saturating_sub(1)];
    }
    clip.windows(2)
        .map(|w| included.iter().map(|&j| (w[1][j] - w[0][j]).abs() / profile.values[j]).sum::<f64>() / included.len() as f64)
        .collect()
}

/// Frames whose rate is a strict local extremum differing from both
/// neighbours by more than `threshold`.
pub fn detect_motion_beats(rate: &[f64], threshold: f64, fps: f64) -> BeatSet {
    let mut times = Vec::new();
    for t in 1..rate.len().saturating_sub(1) {
        let (prev, cur, next) = (rate[t - 1], rate[t], rate[t + 1]);
        let extremum = (cur > prev && cur > next) || (cur < prev && cur < next);
        if extremum && (cur - prev).abs() > threshold && (cur - next).abs() > threshold {
            times.push(t as f64 / fps);
        }
    }
    BeatSet { times, source: BeatSource::Motion }
}

/// Half-wave rectified log spectral flux; frame 0 is zero.
pub fn onset_strength(mel: &MelSpectrogram) -> Vec<f64> {
    const EPS: f64 = 1e-6;
    let mut env = vec![0.0; mel.frames];
    for (t, e) in env.iter_mut().enumerate().skip(1) {
        *e = (0..mel.bins)
            .map(|b| ((mel.get(b, t) + EPS).ln() - (mel.get(b, t - 1) + EPS).ln()).max(0.0))
            .sum();
    }
    env
}

/// Maps envelope frame indices to seconds: `offset + j / rate`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameTiming {
    pub rate: f64,
    pub offset: f64,
}

impl FrameTiming {
    pub fn of_mel(cfg: &MelConfig) -> Self {
        Self { rate: cfg.sample_rate as f64 / cfg.hop as f64, offset: cfg.frame_time(0) }
    }
}

/// Peak picking parameters for audio beats.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeakPicking {
    pub window_seconds: f64,
    pub k: f64,
}

impl Default for PeakPicking {
    fn default() -> Self {
        Self { window_seconds: 1.0, k: 1.0 }
    }
}

/// Local maxima of the envelope above `mean + k * std` of a centred window.
pub fn detect_audio_beats(envelope: &[f64], timing: FrameTiming, picking: PeakPicking) -> BeatSet {
    let n = envelope.len();
    let half = ((picking.window_seconds * timing.rate).round() as usize) / 2;
    let mut times = Vec::new();
    for j in 0..n {
        let cur = envelope[j];
        let left_ok = j == 0 || cur > envelope[j - 1];
        let right_ok = j + 1 == n || cur >= envelope[j + 1];
        if !(left_ok && right_ok) || cur <= 0.0 {
            continue;
        }
        let lo = j.saturating_sub(half);
        let hi = (j + half + 1).min(n);
        let w = &envelope[lo..hi];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        if cur > mean + picking.k * std {
            times.push(timing.offset + j as f64 / timing.rate);
        }
    }
    BeatSet { times, source: BeatSource::Audio }
}

/// Mean Gaussian proximity of each audio beat to its nearest motion beat.
pub fn beat_consistency(motion: &BeatSet, audio: &BeatSet, sigma: f64) -> Result<f64, MetricsError> {
    if motion.is_empty() || audio.is_empty() {
        return Err(MetricsError::EmptyBeats);
    }
    let total: f64 = audio
        .times
        .iter()
        .map(|ta| {
            let d2 = motion.times.iter().map(|tm| (ta - tm).powi(2)).fold(f64::INFINITY, f64::min);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(total / audio.len() as f64)
}
