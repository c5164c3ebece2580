//! Evaluation: Fréchet gesture distance, beat consistency and diversity.

mod autoencoder;
mod beats;
mod frechet;

pub use autoencoder::{AutoencoderReport, AutoencoderTraining, PoseAutoencoder};
pub use beats::{
    angle_change_rate, beat_consistency, detect_audio_beats, detect_motion_beats, maac, onset_strength, BeatSet, BeatSource,
    FrameTiming, MaacProfile, PeakPicking,
};
pub use frechet::{fit_gaussian, frechet_distance, matrix_sqrt_psd, GaussianSummary};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("sequence too short")]
    TooShort,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("beat set is empty")]
    EmptyBeats,
    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive semi-definite (eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),
    #[error("need at least 2 clips for diversity, got {0}")]
    TooFewClips(usize),
    #[error("autoencoder training diverged at epoch {0}")]
    Divergence(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Fréchet distance between the Gaussian fits of two latent clouds.
pub fn fgd(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64, MetricsError> {
    frechet_distance(&fit_gaussian(real)?, &fit_gaussian(generated)?)
}

/// Mean Euclidean distance over `pairs` random latent pairs, drawn with
/// replacement; pairs that pick the same clip twice are redrawn.
pub fn diversity(latents: &[Vec<f64>], pairs: usize, seed: u64) -> Result<f64, MetricsError> {
    let n = latents.len();
    if n < 2 {
        return Err(MetricsError::TooFewClips(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..pairs {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n);
        while b == a {
            b = rng.random_range(0..n);
        }
        total += latents[a].iter().zip(&latents[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    }
    Ok(total / pairs.max(1) as f64)
}
