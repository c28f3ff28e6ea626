use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::mask::BrushParams;
use crate::nn::{DiscriminatorConfig, GeneratorConfig, SegmentationConfig};
use crate::optim::AdamConfig;

/// Where training masks come from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Random free-form brush masks.
    #[default]
    Generator,
    /// PNG masks from a directory (255 = valid, 0 = hole).
    Directory(PathBuf),
}

/// Objective configurations compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Global adversarial + reconstruction only.
    Baseline,
    /// Baseline plus the segmentation confusion game.
    PlusScat,
    /// Additionally the textural contrastive loss.
    PlusText,
    /// Everything, including the semantic contrastive loss.
    #[default]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Baseline,
        Ablation::PlusScat,
        Ablation::PlusText,
        Ablation::Full,
    ];

    pub fn scat_enabled(self) -> bool {
        self != Ablation::Baseline
    }

    /// Zeroes the weights of the objectives this configuration leaves out.
    pub fn apply(self, w: &LossWeights) -> LossWeights {
        let mut w = w.clone();
        if matches!(self, Ablation::Baseline | Ablation::PlusScat) {
            w.lambda_text = 0.0;
        }
        if self != Ablation::Full {
            w.lambda_sem = 0.0;
        }
        w
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::PlusScat => "plus_scat",
            Ablation::PlusText => "plus_text",
            Ablation::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    pub generator: AdamConfig,
    pub discriminator_segmenter: AdamConfig,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            generator: AdamConfig::with_lr(1e-4),
            discriminator_segmenter: AdamConfig::with_lr(4e-4),
        }
    }
}

/// Network widths and depths; spatial size comes from `TrainConfig::image_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub generator_channels: usize,
    pub generator_blocks: usize,
    pub dilation_rates: Vec<usize>,
    pub discriminator_channels: usize,
    pub discriminator_final_channels: usize,
    pub segmentation_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let d = DiscriminatorConfig::default();
        Self {
            generator_channels: g.base_channels,
            generator_blocks: g.num_blocks,
            dilation_rates: g.dilation_rates,
            discriminator_channels: d.base_channels,
            discriminator_final_channels: d.final_channels,
            segmentation_channels: SegmentationConfig::default().base_channels,
        }
    }
}

fn default_image_size() -> usize {
    256
}

fn default_batch_size() -> usize {
    8
}

fn default_checkpoint_every() -> u64 {
    1000
}

fn default_log_every() -> u64 {
    10
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset_dir: PathBuf,
    #[serde(default)]
    pub mask_source: MaskSource,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub max_steps: u64,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub brush: BrushParams,
}

impl TrainConfig {
    /// Parses a JSON config; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            base_channels: self.model.generator_channels,
            num_blocks: self.model.generator_blocks,
            dilation_rates: self.model.dilation_rates.clone(),
            image_size: self.image_size,
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_channels: self.model.discriminator_channels,
            final_channels: self.model.discriminator_final_channels,
            num_taps: self.loss_weights.num_shallow_layers,
            image_size: self.image_size,
        }
    }

    pub fn segmentation(&self) -> SegmentationConfig {
        SegmentationConfig {
            base_channels: self.model.segmentation_channels,
            image_size: self.image_size,
        }
    }

    /// Loss weights with the ablation applied.
    pub fn effective_weights(&self) -> LossWeights {
        self.ablation.apply(&self.loss_weights)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be >= 1"));
        }
        self.loss_weights.validate()?;
        self.optimizer.generator.validate("generator")?;
        self.optimizer
            .discriminator_segmenter
            .validate("discriminator_segmenter")?;
        self.brush.validate()?;
        self.generator().validate()?;
        self.discriminator().validate()?;
        self.segmentation().validate()?;
        Ok(())
    }
}
