use crate::data::MelConfig;

/// Architecture and data-shape settings for the generator and discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Pose frames per clip.
    pub frames: usize,
    /// Leading ground-truth frames given to the decoder.
    pub seed_frames: usize,
    pub fps: f64,
    pub mel: MelConfig,
    /// Channels of the three strided audio convolutions.
    pub audio_channels: [usize; 3],
    /// Channels of the per-tap projection convolutions.
    pub head_channels: usize,
    /// Width of every audio and text feature.
    pub feat_dim: usize,
    /// Token ids `0..vocab`; id 0 is padding. Larger ids hit the OOV row.
    pub vocab: usize,
    pub embed_dim: usize,
    pub text_channels: usize,
    pub style_dim: usize,
    pub speakers: usize,
    /// Hidden size of each decoder GRU direction.
    pub hidden: usize,
    /// Stacked bi-GRU layers per hierarchy level.
    pub gru_layers: usize,
    /// Feed each level's previous output frame back into its decoder.
    pub autoregressive: bool,
    pub disc_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 34,
            seed_frames: 4,
            fps: 15.0,
            mel: MelConfig::default(),
            audio_channels: [32, 64, 64],
            head_channels: 32,
            feat_dim: 32,
            vocab: 16,
            embed_dim: 16,
            text_channels: 32,
            style_dim: 18,
            speakers: 4,
            hidden: 300,
            gru_layers: 1,
            autoregressive: false,
            disc_hidden: 64,
        }
    }
}

impl ModelConfig {
    /// Reduced widths for quick training on a laptop-class CPU.
    pub fn desk() -> Self {
        Self {
            mel: MelConfig { bins: 32, ..MelConfig::default() },
            audio_channels: [16, 16, 16],
            head_channels: 16,
            embed_dim: 8,
            text_channels: 16,
            hidden: 24,
            disc_hidden: 16,
            ..Self::default()
        }
    }

    /// Mel frames of one clip's audio.
    pub fn mel_frames(&self) -> usize {
        self.mel.frame_count(self.mel.clip_samples(self.frames, self.fps))
    }
}
