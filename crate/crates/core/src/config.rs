//! Run configuration as `key = value` text.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::eval::BeatConfig;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Everything a command needs: model shape, loss weights, schedule and
/// metric settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Decoder hierarchy depth: the skeleton's full depth, or 1 for a single
    /// holistic level.
    pub levels: usize,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub beats: BeatConfig,
    pub epochs: usize,
    /// Write a checkpoint every this many epochs (0 writes only the last).
    pub checkpoint_every: usize,
    /// Epochs of the FGD autoencoder.
    pub ae_epochs: usize,
    pub diversity_pairs: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            levels: 6,
            weights: LossWeights::default(),
            train: TrainConfig::default(),
            beats: BeatConfig::default(),
            epochs: 200,
            checkpoint_every: 10,
            ae_epochs: 20,
            diversity_pairs: 500,
            seed: 0,
        }
    }
}

/// Keys accepted by [`RunConfig::set`], in dump order.
pub const KEYS: &[&str] = &[
    "preset",
    "frames",
    "seed_frames",
    "fps",
    "mel_bins",
    "feat_dim",
    "hidden",
    "gru_layers",
    "disc_hidden",
    "autoregressive",
    "levels",
    "lambda_gan",
    "lambda_h",
    "lambda_p",
    "lambda_s",
    "lambda_k",
    "lambda_c",
    "tau",
    "epsilon",
    "huber_delta",
    "lr",
    "lr_disc",
    "batch_size",
    "micro_batch",
    "style_every",
    "calibration_clips",
    "epochs",
    "checkpoint_every",
    "ae_epochs",
    "diversity_pairs",
    "bc_threshold",
    "sigma",
    "seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into() })
}

impl RunConfig {
    /// Reduced widths and a faster schedule sized for a laptop CPU.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig { lr: 1e-3, style_every: 4, calibration_clips: 64, ..TrainConfig::default() },
            ..Self::default()
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. A `preset` line
    /// resets everything, so it is applied before the other keys.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.into() })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.into() });
            }
            pairs.push((k.to_string(), v.to_string()));
        }
        pairs.sort_by_key(|(k, _)| k != "preset");
        let mut cfg = Self::default();
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        let w = &mut self.weights;
        let t = &mut self.train;
        match key {
            "preset" => {
                let seed = self.seed;
                *self = match value {
                    "full" => Self::default(),
                    "desk" => Self::desk(),
                    _ => return Err(ConfigError::BadValue { key: key.into(), value: value.into() }),
                };
                self.seed = seed;
            }
            "frames" => m.frames = parse(key, value)?,
            "seed_frames" => m.seed_frames = parse(key, value)?,
            "fps" => m.fps = parse(key, value)?,
            "mel_bins" => m.mel.bins = parse(key, value)?,
            "feat_dim" => m.feat_dim = parse(key, value)?,
            "hidden" => m.hidden = parse(key, value)?,
            "gru_layers" => m.gru_layers = parse(key, value)?,
            "disc_hidden" => m.disc_hidden = parse(key, value)?,
            "autoregressive" => m.autoregressive = parse(key, value)?,
            "levels" => self.levels = parse(key, value)?,
            "lambda_gan" => w.lambda_gan = parse(key, value)?,
            "lambda_h" => w.lambda_h = parse(key, value)?,
            "lambda_p" => w.lambda_p = parse(key, value)?,
            "lambda_s" => w.lambda_s = parse(key, value)?,
            "lambda_k" => w.lambda_k = parse(key, value)?,
            "lambda_c" => w.lambda_c = parse(key, value)?,
            "tau" => w.tau = parse(key, value)?,
            "epsilon" => w.epsilon_clip = parse(key, value)?,
            "huber_delta" => w.huber_delta = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "lr_disc" => t.lr_disc = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "micro_batch" => t.micro_batch = parse(key, value)?,
            "style_every" => t.style_every = parse(key, value)?,
            "calibration_clips" => t.calibration_clips = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "ae_epochs" => self.ae_epochs = parse(key, value)?,
            "diversity_pairs" => self.diversity_pairs = parse(key, value)?,
            "bc_threshold" => self.beats.threshold = parse(key, value)?,
            "sigma" => self.beats.sigma = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair.split_once('=').ok_or_else(|| ConfigError::Syntax { line: 0, text: pair.into() })?;
        self.set(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        let m = &self.model;
        if m.seed_frames == 0 || m.seed_frames >= m.frames {
            return bad(format!("seed_frames must be in 1..{}, got {}", m.frames, m.seed_frames));
        }
        if !(m.fps.is_finite() && m.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", m.fps));
        }
        if m.mel.bins == 0 || m.feat_dim == 0 || m.hidden == 0 || m.gru_layers == 0 || m.disc_hidden == 0 {
            return bad("widths must be positive".into());
        }
        if self.levels == 0 {
            return bad("levels must be positive".into());
        }
        if self.train.batch_size < 2 || self.train.micro_batch < 2 {
            return bad("batch_size and micro_batch must be at least 2".into());
        }
        if !(self.train.lr > 0.0 && self.train.lr_disc >= 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.beats.threshold >= 0.0 && self.beats.sigma > 0.0) {
            return bad("bc_threshold must be >= 0 and sigma > 0".into());
        }
        self.weights.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Value of `key` as it would be written in a config file.
    pub fn get(&self, key: &str) -> Option<String> {
        let (m, w, t) = (&self.model, &self.weights, &self.train);
        Some(match key {
            "frames" => m.frames.to_string(),
            "seed_frames" => m.seed_frames.to_string(),
            "fps" => m.fps.to_string(),
            "mel_bins" => m.mel.bins.to_string(),
            "feat_dim" => m.feat_dim.to_string(),
            "hidden" => m.hidden.to_string(),
            "gru_layers" => m.gru_layers.to_string(),
            "disc_hidden" => m.disc_hidden.to_string(),
            "autoregressive" => m.autoregressive.to_string(),
            "levels" => self.levels.to_string(),
            "lambda_gan" => w.lambda_gan.to_string(),
            "lambda_h" => w.lambda_h.to_string(),
            "lambda_p" => w.lambda_p.to_string(),
            "lambda_s" => w.lambda_s.to_string(),
            "lambda_k" => w.lambda_k.to_string(),
            "lambda_c" => w.lambda_c.to_string(),
            "tau" => w.tau.to_string(),
            "epsilon" => w.epsilon_clip.to_string(),
            "huber_delta" => w.huber_delta.to_string(),
            "lr" => t.lr.to_string(),
            "lr_disc" => t.lr_disc.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "micro_batch" => t.micro_batch.to_string(),
            "style_every" => t.style_every.to_string(),
            "calibration_clips" => t.calibration_clips.to_string(),
            "epochs" => self.epochs.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "ae_epochs" => self.ae_epochs.to_string(),
            "diversity_pairs" => self.diversity_pairs.to_string(),
            "bc_threshold" => self.beats.threshold.to_string(),
            "sigma" => self.beats.sigma.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// Every setting except the preset, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().filter_map(|&k| self.get(k).map(|v| (k, v))).collect()
    }

    /// Config text that parses back to `self`. Mel settings other than the
    /// bin count and channel widths outside the desk preset are not keys,
    /// so the preset is recorded when it matches.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let base = if self.model.audio_channels == ModelConfig::desk().audio_channels { "desk" } else { "full" };
        let _ = writeln!(out, "preset = {base}");
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
