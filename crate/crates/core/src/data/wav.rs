use std::f64::consts::PI;
use std::path::Path;

use hound::{SampleFormat, WavSpec};

use super::DataError;

/// Sample rate every decoded signal is converted to.
pub const TARGET_RATE: u32 = 16_000;

/// Decodes a PCM16 or float32 WAV file to mono samples at 16 kHz.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Vec<f64>, DataError> {
    let reader = hound::WavReader::open(path).map_err(map_header)?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(DataError::UnsupportedFormat(format!("{} channels", spec.channels)));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(map_hound)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => return Err(DataError::UnsupportedFormat(format!("{:?} with {} bits", fmt, bits))),
    };
    let ch = spec.channels as usize;
    let mono: Vec<f64> = interleaved.chunks(ch).map(|c| c.iter().sum::<f64>() / ch as f64).collect();
    Ok(resample(&mono, spec.sample_rate, TARGET_RATE))
}

// Opening only parses the header, so short reads there mean a truncated header.
fn map_header(e: hound::Error) -> DataError {
    match e {
        hound::Error::IoError(io) if !matches!(io.kind(), std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied) => {
            DataError::CorruptHeader(io.to_string())
        }
        other => map_hound(other),
    }
}

fn map_hound(e: hound::Error) -> DataError {
    match e {
        hound::Error::IoError(io) => DataError::Io(io),
        hound::Error::FormatError(m) => DataError::CorruptHeader(m.to_string()),
        hound::Error::Unsupported => DataError::UnsupportedFormat("unsupported WAV encoding".into()),
        other => DataError::CorruptHeader(other.to_string()),
    }
}

/// Writes mono PCM16 at the given rate; samples are clipped to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], rate: u32) -> Result<(), DataError> {
    let spec = WavSpec { channels: 1, sample_rate: rate, bits_per_sample: 16, sample_format: SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).map_err(map_hound)?;
    for s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(map_hound)?;
    }
    w.finalize().map_err(map_hound)
}

/// Band-limited resampling with a Blackman-windowed sinc kernel.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let ratio = to as f64 / from as f64;
    // cutoff relative to the source Nyquist, with a little guard band
    let cutoff = ratio.min(1.0) * 0.95;
    let zero_crossings = 24.0;
    let half = (zero_crossings / cutoff).ceil() as isize;
    let n_out = ((x.len() as f64) * ratio).round() as usize;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out {
        let t = n as f64 / ratio;
        let centre = t.floor() as isize;
        let mut acc = 0.0;
        for k in (centre - half + 1)..=(centre + half) {
            if k < 0 || k as usize >= x.len() {
                continue;
            }
            let u = t - k as f64;
            let w = blackman(u / (half as f64));
            acc += x[k as usize] * cutoff * sinc(cutoff * u) * w;
        }
        out.push(acc);
    }
    out
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Blackman window on `[-1, 1]`, zero outside.
fn blackman(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let p = PI * (u + 1.0);
    0.42 - 0.5 * p.cos() + 0.08 * (2.0 * p).cos()
}
