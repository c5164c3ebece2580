use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::DataError;

/// STFT and filterbank settings.
#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
    pub bins: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { sample_rate: 16_000, fft_size: 1024, hop: 512, bins: 128, fmin: 0.0, fmax: 8000.0 }
    }
}

impl MelConfig {
    /// Frame count for `samples` input samples (no padding).
    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.fft_size {
            0
        } else {
            (samples - self.fft_size) / self.hop + 1
        }
    }

    /// Samples of audio that precede the first pose frame in a clip, chosen
    /// so the first analysis window is centred on time zero.
    pub fn lead(&self) -> usize {
        (self.fft_size - self.hop) / 2
    }

    /// Audio length for a clip of `frames` pose frames at `fps`.
    pub fn clip_samples(&self, frames: usize, fps: f64) -> usize {
        (frames as f64 * self.sample_rate as f64 / fps).round() as usize + (self.fft_size - self.hop)
    }

    /// Time in seconds (relative to the first pose frame) of mel frame `j`.
    pub fn frame_time(&self, j: usize) -> f64 {
        (j * self.hop + self.fft_size / 2) as f64 / self.sample_rate as f64 - self.lead() as f64 / self.sample_rate as f64
    }

    fn filterbank(&self) -> Vec<Vec<(usize, f64)>> {
        let hz_to_mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let mel_to_hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let (lo, hi) = (hz_to_mel(self.fmin), hz_to_mel(self.fmax));
        let edges: Vec<f64> = (0..self.bins + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (self.bins + 1) as f64)).collect();
        let n_freq = self.fft_size / 2 + 1;
        let bin_hz = self.sample_rate as f64 / self.fft_size as f64;
        (0..self.bins)
            .map(|b| {
                let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
                (0..n_freq)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = ((f - l) / (c - l)).min((r - f) / (r - c));
                        (w > 0.0).then_some((k, w))
                    })
                    .collect()
            })
            .collect()
    }
}

/// Mel-band power, stored bin-major: `values[bin * frames + t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub bins: usize,
    pub frames: usize,
    pub values: Vec<f64>,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn get(&self, bin: usize, t: usize) -> f64 {
        self.values[bin * self.frames + t]
    }

    /// Column `t` across all bins.
    pub fn column(&self, t: usize) -> Vec<f64> {
        (0..self.bins).map(|b| self.get(b, t)).collect()
    }
}

/// Hann-windowed power STFT followed by a triangular mel filterbank.
pub fn mel_spectrogram(samples: &[f64], config: &MelConfig) -> Result<MelSpectrogram, DataError> {
    if samples.len() < config.fft_size {
        return Err(DataError::TooShort { got: samples.len(), need: config.fft_size });
    }
    let frames = config.frame_count(samples.len());
    let n = config.fft_size;
    let window: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
    let fft: Arc<dyn rustfft::Fft<f64>> = FftPlanner::new().plan_fft_forward(n);
    let bank = config.filterbank();
    let mut values = vec![0.0; config.bins * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut power = vec![0.0; n / 2 + 1];
    for t in 0..frames {
        let seg = &samples[t * config.hop..t * config.hop + n];
        for ((b, s), w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (b, taps) in bank.iter().enumerate() {
            values[b * frames + t] = taps.iter().map(|&(k, w)| w * power[k]).sum();
        }
    }
    Ok(MelSpectrogram { bins: config.bins, frames, values, config: config.clone() })
}
