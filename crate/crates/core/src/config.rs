//! Hyperparameters and the structured configuration document.
//!
//! The configuration file is TOML with one section per concern:
//!
//! ```toml
//! [hyper]      # HyperParams
//! [translator] # stage-1 architecture and ablation switches
//! [motion]     # stage-2 architecture
//! [data]       # pair sampling
//! [augment]    # augmentation magnitudes
//! ```
//!
//! Every key is optional; missing keys take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::StepDecay;

/// Scalars shared by both training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Number of keypoints.
    pub keypoints: usize,
    /// Gaussian map standard deviation, normalized-coordinate units.
    pub sigma: f64,
    /// Perceptual-loss weight of the stage-1 generator objective.
    pub lambda1: f64,
    /// Keypoint-sequence L1 weight of the motion objective.
    pub lambda2: f64,
    /// Sequence-adversarial weight of the motion objective.
    pub lambda3: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Multiplicative learning-rate decay applied every `lr_decay_every` steps.
    pub lr_decay: f64,
    pub lr_decay_every: u64,
    /// `[height, width]` in pixels.
    pub image_size: [usize; 2],
    /// Number of predicted future frames.
    pub horizon: usize,
    /// Number of action classes.
    pub action_count: usize,
    pub latent_dim: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            keypoints: 40,
            sigma: 0.1,
            lambda1: 1.0,
            lambda2: 1000.0,
            lambda3: 2.0,
            learning_rate: 1e-4,
            batch_size: 32,
            beta1: 0.5,
            beta2: 0.999,
            lr_decay: 0.95,
            lr_decay_every: 20_000,
            image_size: [128, 128],
            horizon: 16,
            action_count: 9,
            latent_dim: 32,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be non-negative, got {v}")))
    }
}

fn open_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must lie in (0, 1), got {v}")))
    }
}

fn nonzero(name: &str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be at least 1")))
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        nonzero("keypoints", self.keypoints)?;
        positive("sigma", self.sigma)?;
        non_negative("lambda1", self.lambda1)?;
        non_negative("lambda2", self.lambda2)?;
        non_negative("lambda3", self.lambda3)?;
        positive("learning_rate", self.learning_rate)?;
        nonzero("batch_size", self.batch_size)?;
        open_unit("beta1", self.beta1)?;
        open_unit("beta2", self.beta2)?;
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::config("lr_decay_every must be at least 1"));
        }
        let [h, w] = self.image_size;
        if h < 2 || w < 2 {
            return Err(Error::config(format!(
                "image_size must be at least 2x2, got {h}x{w}"
            )));
        }
        nonzero("horizon", self.horizon)?;
        nonzero("action_count", self.action_count)?;
        nonzero("latent_dim", self.latent_dim)?;
        Ok(())
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            initial: self.learning_rate,
            factor: self.lr_decay,
            every: self.lr_decay_every,
        }
    }

    pub fn height(&self) -> usize {
        self.image_size[0]
    }

    pub fn width(&self) -> usize {
        self.image_size[1]
    }
}

/// Stage-1 network sizes and component switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslatorConfig {
    /// Width of the first convolution of every image network.
    pub base_channels: usize,
    /// Number of stride-2 levels of the translator encoder (and decoder).
    pub depth: usize,
    /// Stride of each detector convolution block, 1 or 2.
    pub detector_strides: Vec<usize>,
    pub detector_residual_blocks: usize,
    /// Stride-2 blocks of the image discriminator.
    pub discriminator_blocks: usize,
    /// Blend the reference image through a predicted background mask.
    pub use_mask: bool,
    /// Condition the translator on reference keypoints as well as target ones.
    pub use_reference_keypoints: bool,
    /// Also feed Gaussian maps to every decoder resolution of the translator.
    pub multiscale_maps: bool,
    /// Block indices of the perceptual extractor averaged by the loss; 0 is
    /// the raw image.
    pub perceptual_layers: Vec<usize>,
    /// Seed of the frozen perceptual extractor.
    pub perceptual_seed: u64,
    /// Largest frame-index gap of a training pair; `None` allows any gap.
    pub pair_max_gap: Option<usize>,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 4,
            detector_strides: vec![1, 2, 1, 2],
            detector_residual_blocks: 2,
            discriminator_blocks: 4,
            use_mask: true,
            use_reference_keypoints: true,
            multiscale_maps: false,
            perceptual_layers: vec![0, 1, 2, 3, 4, 5],
            perceptual_seed: 0x5eed,
            pair_max_gap: None,
        }
    }
}

impl TranslatorConfig {
    pub fn validate(&self) -> Result<()> {
        nonzero("translator.base_channels", self.base_channels)?;
        if self.depth > 8 || self.discriminator_blocks > 8 {
            return Err(Error::config("translator: depth and discriminator_blocks are limited to 8"));
        }
        if self.detector_strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::config("translator.detector_strides: each stride must be 1 or 2"));
        }
        if self.perceptual_layers.is_empty() {
            return Err(Error::config("translator.perceptual_layers must not be empty"));
        }
        if let Some(&bad) = self.perceptual_layers.iter().find(|&&l| l > 5) {
            return Err(Error::config(format!(
                "translator.perceptual_layers: layer {bad} does not exist (0..=5)"
            )));
        }
        if self.pair_max_gap == Some(0) {
            return Err(Error::config("translator.pair_max_gap must be at least 1"));
        }
        Ok(())
    }
}

/// Recurrent cell families available to the motion generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Lstm,
}

/// Stage-2 network sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    pub cell: CellKind,
    pub hidden: usize,
    pub layers: usize,
    /// Decoder emits per-step offsets on the previous frame instead of
    /// absolute coordinates.
    pub predict_deltas: bool,
    /// Channel width of the sequence discriminator.
    pub discriminator_channels: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            cell: CellKind::Lstm,
            hidden: 256,
            layers: 1,
            predict_deltas: true,
            discriminator_channels: 64,
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<()> {
        nonzero("motion.hidden", self.hidden)?;
        nonzero("motion.discriminator_channels", self.discriminator_channels)?;
        if self.layers != 1 {
            return Err(Error::config("motion.layers: only single-layer cells are supported"));
        }
        Ok(())
    }
}

/// Augmentation switches and magnitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    pub flip_probability: f64,
    /// Maximum absolute rotation in degrees; 0 disables rotation.
    pub rotation_degrees: f64,
    pub crop: bool,
    /// Smallest crop side as a fraction of the frame; the crop side is drawn
    /// from `[crop_fraction, 1]`. Must lie in (0, 1).
    pub crop_fraction: f64,
    /// Per-channel gain drawn from `[1 - s, 1 + s]`; 0 disables the filter.
    pub color_strength: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            flip_probability: 0.5,
            rotation_degrees: 10.0,
            crop: true,
            crop_fraction: 0.85,
            color_strength: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            flip: false,
            flip_probability: 0.0,
            rotation_degrees: 0.0,
            crop: false,
            crop_fraction: 0.85,
            color_strength: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crop_fraction > 0.0 && self.crop_fraction < 1.0) {
            return Err(Error::config(format!(
                "augment.crop_fraction must lie in (0, 1), got {}",
                self.crop_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::config("augment.flip_probability must lie in [0, 1]"));
        }
        non_negative("augment.rotation_degrees", self.rotation_degrees)?;
        if !(0.0..1.0).contains(&self.color_strength) {
            return Err(Error::config("augment.color_strength must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Dataset-level options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Split used for training; `all` ignores split files.
    pub train_split: String,
    /// Split used by evaluation.
    pub eval_split: String,
    /// Seed of batch sampling and augmentation draws.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_split: "train".into(),
            eval_split: "test".into(),
            seed: 0,
        }
    }
}

/// Training-loop lengths, initialization and logging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub translator_steps: u64,
    pub motion_steps: u64,
    /// Seed of parameter initialization.
    pub init_seed: u64,
    /// Metrics are logged every this many steps.
    pub log_every: u64,
    /// Stride between the start frames of stage-2 training windows.
    pub window_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            translator_steps: 10_000,
            motion_steps: 10_000,
            init_seed: 1,
            log_every: 100,
            window_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        nonzero("train.log_every", self.log_every as usize)?;
        nonzero("train.window_stride", self.window_stride)
    }
}

/// The whole configuration document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub hyper: HyperParams,
    pub translator: TranslatorConfig,
    pub motion: MotionConfig,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.train.validate()?;
        self.translator.validate()?;
        self.motion.validate()?;
        self.augment.validate()?;
        let [h, w] = self.hyper.image_size;
        let t = &self.translator;
        let checks = [
            ("translator.depth", 1usize << t.depth),
            ("translator.discriminator_blocks", 1usize << t.discriminator_blocks),
            ("translator.detector_strides", t.detector_strides.iter().product()),
        ];
        for (what, factor) in checks {
            if h % factor != 0 || w % factor != 0 || h / factor < 1 || w / factor < 1 {
                return Err(Error::config(format!(
                    "image_size {h}x{w} is not divisible by {factor} as required by {what}"
                )));
            }
        }
        let stride: usize = t.detector_strides.iter().product();
        if h / stride < 2 || w / stride < 2 {
            return Err(Error::config(format!(
                "detector logits for {h}x{w} images would be smaller than 2x2"
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = Config::default();
        cfg.hyper.keypoints = 4;
        cfg.translator.pair_max_gap = Some(3);
        let back = Config::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_out_of_range_values() {
        for doc in [
            "[hyper]\nsigma = 0.0",
            "[hyper]\nbeta1 = 1.0",
            "[hyper]\nlr_decay = 0.0",
            "[hyper]\nimage_size = [60, 64]",
            "[hyper]\nkeypoints = 0",
            "[augment]\ncrop_fraction = 1.0",
            "[translator]\nperceptual_layers = [7]",
            "[hyper]\nunknown_key = 1",
        ] {
            assert!(Config::from_toml_str(doc).is_err(), "{doc} accepted");
        }
    }
}
