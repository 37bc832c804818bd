use std::fmt;

use serde::{Deserialize, Serialize};

use super::{LossWeights, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Layer sizes and schedules exactly as published.
    Paper,
    /// Shrunk sizes that train on a CPU in minutes.
    Desk,
    /// Tiny sizes for finite-difference gradient checks.
    Micro,
    Custom,
}

/// Which Gaussian carries the KL prior constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlPlacement {
    /// On the projection of the domain embedding (after the token layer).
    PostUtl,
    /// On the raw reference embedding; the sampled code then queries the tokens.
    PreUtl,
}

/// Route used to recover the latent code of a generated sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recovery {
    /// Reference encoder, token layer and Gaussian projection.
    FullAttention,
    /// Reference encoder followed by a dedicated linear head.
    EncoderOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    /// Mean absolute difference.
    L1,
    /// Root mean squared difference.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanGeneratorLoss {
    /// `-log D(fake)`.
    NonSaturating,
    /// `log(1 - D(fake))`, the literal minimax term.
    Minimax,
}

/// Where the latent code enters the image generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZInjection {
    Bottleneck,
    Input,
}

/// How modality subnet weights are keyed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSharing {
    /// One set of subnet weights per modality, reusable across tasks.
    PerModality,
    /// Separate subnet weights per task.
    PerTask,
}

/// Architecture, optimisation and objective settings.
///
/// Serialises to a flat key/value file (see [`super::config_file`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub latent_dim: usize,
    pub n_tokens: usize,
    pub n_heads: usize,
    pub token_dim: usize,
    pub ref_encoder_channels: Vec<usize>,
    /// Stride of the reference encoder convs along the feature/width axis.
    pub ref_encoder_stride: usize,
    pub ref_gru_units: usize,
    pub prenet_conv_channels: Vec<usize>,
    /// Feature-axis stride of the sequence prenet (time stride is always 1).
    pub prenet_freq_stride: usize,
    pub char_embed_dim: usize,
    pub text_fc_units: Vec<usize>,
    pub conv1d_bank_size: usize,
    pub cbhg_units: usize,
    pub cbhg_fc_layers: usize,
    pub generator_gru_units: usize,
    pub image_resblocks_down: usize,
    pub image_resblocks_up: usize,
    /// Number of stride-2 stages inside the residual stacks.
    pub image_downsamples: usize,
    pub image_base_channels: usize,
    pub instance_norm: bool,
    pub disc_channels: Vec<usize>,
    pub image_size: usize,
    pub source_image_channels: usize,
    pub frame_dim: usize,
    pub vocab_size: usize,
    /// Output length for text generated from an image when no target
    /// fixes it.
    pub text_out_len: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard step budget; 0 derives the budget from `epochs`.
    pub max_steps: usize,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub diverge_limit: usize,
    pub use_attention: bool,
    pub kl_placement: KlPlacement,
    pub recovery: Recovery,
    pub recovery_uses_mean: bool,
    pub norm: Norm,
    pub gan_generator_loss: GanGeneratorLoss,
    pub z_injection: ZInjection,
    pub weight_sharing: WeightSharing,
    pub seq_attention: bool,
    pub dist_eps: f64,
    #[serde(flatten)]
    pub loss: LossWeights,
}

impl ModelConfig {
    /// Sizes as published for the reference encoder, token layer, prenets
    /// and generators, trained with Adam. Schedule defaults to the
    /// image-to-image setting; see [`ModelConfig::with_paper_schedule`].
    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            latent_dim: 128,
            n_tokens: 10,
            n_heads: 4,
            token_dim: 128,
            ref_encoder_channels: vec![64, 64, 128, 128],
            ref_encoder_stride: 2,
            ref_gru_units: 128,
            prenet_conv_channels: vec![32, 32],
            prenet_freq_stride: 2,
            char_embed_dim: 128,
            text_fc_units: vec![256, 128],
            conv1d_bank_size: 16,
            cbhg_units: 128,
            cbhg_fc_layers: 4,
            generator_gru_units: 256,
            image_resblocks_down: 6,
            image_resblocks_up: 6,
            image_downsamples: 3,
            image_base_channels: 64,
            instance_norm: true,
            disc_channels: vec![64, 128, 256],
            image_size: 256,
            source_image_channels: 3,
            frame_dim: 80,
            vocab_size: 128,
            text_out_len: 32,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 1,
            epochs: 30,
            max_steps: 0,
            seed: 1,
            checkpoint_every: 0,
            diverge_limit: 10,
            use_attention: true,
            kl_placement: KlPlacement::PostUtl,
            recovery: Recovery::FullAttention,
            recovery_uses_mean: true,
            norm: Norm::L1,
            gan_generator_loss: GanGeneratorLoss::NonSaturating,
            z_injection: ZInjection::Bottleneck,
            weight_sharing: WeightSharing::PerModality,
            seq_attention: true,
            dist_eps: 1e-4,
            loss: LossWeights::default(),
        }
    }

    /// Batch size and duration published for each task.
    pub fn with_paper_schedule(mut self, task: &TaskSpec) -> Self {
        use super::ModalityTag::*;
        match (task.source, task.target) {
            (Image, Image) => {
                self.batch_size = 1;
                self.epochs = 30;
                self.max_steps = 0;
            }
            (Text, Image) | (Image, Text) => {
                self.batch_size = 32;
                self.epochs = 300;
                self.max_steps = 0;
            }
            _ => {
                self.batch_size = 32;
                self.max_steps = 200_000;
            }
        }
        self
    }

    /// CPU-sized configuration for the synthetic tasks.
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            latent_dim: 8,
            n_tokens: 10,
            n_heads: 2,
            token_dim: 32,
            ref_encoder_channels: vec![8, 8, 16, 16],
            ref_encoder_stride: 2,
            ref_gru_units: 32,
            prenet_conv_channels: vec![8, 8],
            prenet_freq_stride: 2,
            char_embed_dim: 16,
            text_fc_units: vec![32, 16],
            conv1d_bank_size: 4,
            cbhg_units: 16,
            cbhg_fc_layers: 2,
            generator_gru_units: 32,
            image_resblocks_down: 2,
            image_resblocks_up: 2,
            image_downsamples: 2,
            image_base_channels: 8,
            instance_norm: true,
            disc_channels: vec![8, 16, 32],
            image_size: 32,
            source_image_channels: 1,
            frame_dim: 8,
            vocab_size: 32,
            text_out_len: 3,
            batch_size: 8,
            epochs: 5,
            learning_rate: 1e-3,
            ..Self::paper()
        }
    }

    /// A configuration small enough (a few thousand parameters) for
    /// exhaustive finite-difference checks.
    pub fn micro() -> Self {
        Self {
            preset: Preset::Micro,
            latent_dim: 3,
            n_tokens: 3,
            n_heads: 1,
            token_dim: 4,
            ref_encoder_channels: vec![2, 3],
            ref_encoder_stride: 2,
            ref_gru_units: 4,
            prenet_conv_channels: vec![2, 2],
            prenet_freq_stride: 2,
            char_embed_dim: 3,
            text_fc_units: vec![4, 3],
            conv1d_bank_size: 2,
            cbhg_units: 3,
            cbhg_fc_layers: 1,
            generator_gru_units: 4,
            image_resblocks_down: 1,
            image_resblocks_up: 1,
            image_downsamples: 1,
            image_base_channels: 2,
            instance_norm: true,
            disc_channels: vec![3],
            image_size: 8,
            source_image_channels: 1,
            frame_dim: 4,
            vocab_size: 6,
            batch_size: 2,
            epochs: 1,
            ..Self::desk()
        }
    }

    pub fn for_preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk | Preset::Custom => Self::desk(),
            Preset::Micro => Self::micro(),
        }
    }
}

/// One violated configuration constraint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub constraint: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, constraint: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            constraint: constraint.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.field, self.constraint)
    }
}

/// Returns every violated invariant of `cfg`.
pub fn validate_config(cfg: &ModelConfig) -> std::result::Result<(), Vec<ConfigError>> {
    let mut errs = Vec::new();
    let positive = [
        ("latent_dim", cfg.latent_dim),
        ("n_tokens", cfg.n_tokens),
        ("n_heads", cfg.n_heads),
        ("token_dim", cfg.token_dim),
        ("ref_encoder_stride", cfg.ref_encoder_stride),
        ("ref_gru_units", cfg.ref_gru_units),
        ("prenet_freq_stride", cfg.prenet_freq_stride),
        ("char_embed_dim", cfg.char_embed_dim),
        ("conv1d_bank_size", cfg.conv1d_bank_size),
        ("cbhg_units", cfg.cbhg_units),
        ("generator_gru_units", cfg.generator_gru_units),
        ("image_base_channels", cfg.image_base_channels),
        ("image_size", cfg.image_size),
        ("source_image_channels", cfg.source_image_channels),
        ("frame_dim", cfg.frame_dim),
        ("vocab_size", cfg.vocab_size),
        ("text_out_len", cfg.text_out_len),
        ("batch_size", cfg.batch_size),
        ("diverge_limit", cfg.diverge_limit),
    ];
    for (name, v) in positive {
        if v == 0 {
            errs.push(ConfigError::new(name, "must be ≥1"));
        }
    }
    let lists = [
        ("ref_encoder_channels", &cfg.ref_encoder_channels),
        ("prenet_conv_channels", &cfg.prenet_conv_channels),
        ("text_fc_units", &cfg.text_fc_units),
        ("disc_channels", &cfg.disc_channels),
    ];
    for (name, v) in lists {
        if v.is_empty() || v.contains(&0) {
            errs.push(ConfigError::new(name, "must be a non-empty list of values ≥1"));
        }
    }
    if cfg.n_heads > 0 && !cfg.token_dim.is_multiple_of(cfg.n_heads) {
        errs.push(ConfigError::new(
            "token_dim",
            format!("must be divisible by n_heads ({})", cfg.n_heads),
        ));
    }
    if cfg.image_downsamples > cfg.image_resblocks_down
        || cfg.image_downsamples > cfg.image_resblocks_up
    {
        errs.push(ConfigError::new(
            "image_downsamples",
            "must not exceed image_resblocks_down or image_resblocks_up",
        ));
    }
    let factor = 1usize << cfg.image_downsamples.min(20);
    if cfg.image_size > 0 && (!cfg.image_size.is_multiple_of(factor) || !cfg.image_size.is_multiple_of(4)) {
        errs.push(ConfigError::new(
            "image_size",
            format!("must be divisible by 4 and by 2^image_downsamples ({factor})"),
        ));
    }
    if cfg.epochs == 0 && cfg.max_steps == 0 {
        errs.push(ConfigError::new("epochs", "must be ≥1 when max_steps is 0"));
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        errs.push(ConfigError::new("learning_rate", "must be > 0"));
    }
    for (name, b) in [("adam_beta1", cfg.adam_beta1), ("adam_beta2", cfg.adam_beta2)] {
        if !(0.0..1.0).contains(&b) {
            errs.push(ConfigError::new(name, "must lie in [0, 1)"));
        }
    }
    if !(cfg.dist_eps.is_finite() && cfg.dist_eps > 0.0) {
        errs.push(ConfigError::new("dist_eps", "must be > 0"));
    }
    if let Err(mut e) = cfg.loss.validate() {
        errs.append(&mut e);
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}
