#![allow(dead_code)]

use std::path::Path;

use scat_core::trainer::{Ablation, ModelConfig, TrainConfig};

/// Small networks at 64×64 on a synthetic texture directory. The generator
/// learning rate is raised to 1e-3 so 200 steps are enough to see it learn.
pub fn smoke_config(data: &Path, out: &Path, ablation: Ablation) -> TrainConfig {
    let mut c = TrainConfig::from_json(&format!(
        r#"{{"dataset_dir": {:?}, "max_steps": 200, "image_size": 64, "batch_size": 4,
            "checkpoint_every": 0, "log_every": 1, "output_dir": {:?}}}"#,
        data, out
    ))
    .unwrap();
    c.ablation = ablation;
    c.optimizer.generator.learning_rate = 1e-3;
    c.model = ModelConfig {
        generator_channels: 16,
        generator_blocks: 2,
        dilation_rates: vec![1, 2, 4, 8],
        discriminator_channels: 16,
        discriminator_final_channels: 1,
        segmentation_channels: 8,
    };
    c
}

/// Tiny networks at 32×32, batch 2, for fast pipeline tests.
pub fn tiny_config(data: &Path, out: &Path, ablation: Ablation) -> TrainConfig {
    let mut c = TrainConfig::from_json(&format!(
        r#"{{"dataset_dir": {:?}, "max_steps": 1, "image_size": 32, "batch_size": 2,
            "checkpoint_every": 1, "log_every": 1, "output_dir": {:?}}}"#,
        data, out
    ))
    .unwrap();
    c.ablation = ablation;
    c.model = ModelConfig {
        generator_channels: 8,
        generator_blocks: 1,
        dilation_rates: vec![1, 2],
        discriminator_channels: 8,
        discriminator_final_channels: 1,
        segmentation_channels: 4,
    };
    c
}
