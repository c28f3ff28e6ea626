//! Alternating optimisation of (D, S) and G, the data pipeline, logging and
//! checkpoints.
//!
//! Each step first updates the discriminator and segmenter jointly on
//! `λ_adv·(adv_D + scat_S)` with the composite detached, then updates the
//! generator on the weighted generator total with D and S evaluated in
//! [`Mode::Frozen`]. Each optimizer only owns its own networks, so the other
//! side stays bit-identical through an update.

mod checkpoint;
mod config;
mod data;

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::Serialize;

pub use checkpoint::{
    load_generator, read_checkpoint_info, CheckpointInfo, CHECKPOINT_FORMAT,
};
pub use config::{Ablation, MaskSource, ModelConfig, OptimizerSettings, TrainConfig};
pub use data::{derive_seed, Batch, BatchSchedule, Dataset, MaskSampler};

use crate::error::{Error, Result};
use crate::losses::{self, scalar, LossReport, LossWeights, ScatForm};
use crate::mask::{compose, corrupt};
use crate::nn::{Discriminator, FeaturePyramid, Generator, Mode, SegmentationNet};
use crate::optim::Adam;

const TAG_GENERATOR: u64 = 0x47;
const TAG_DISCRIMINATOR: u64 = 0x44;
const TAG_SEGMENTER: u64 = 0x53;

/// Everything needed to continue training: networks (with their
/// power-iteration vectors), optimizer moments and the step counter. Data
/// order is a pure function of `(seed, step)`, so no RNG state is stored.
pub struct TrainState {
    config: TrainConfig,
    step: u64,
    generator: Generator,
    discriminator: Discriminator,
    segmenter: Option<SegmentationNet>,
    opt_g: Adam,
    opt_ds: Adam,
    device: Device,
}

impl std::fmt::Debug for TrainState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainState")
            .field("step", &self.step)
            .field("ablation", &self.config.ablation)
            .finish_non_exhaustive()
    }
}

impl TrainState {
    /// Fresh networks and optimizers. The baseline ablation has no segmenter.
    pub fn new(config: &TrainConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let generator = Generator::new(
            &config.generator(),
            derive_seed(seed, TAG_GENERATOR, 0),
            DType::F32,
            device,
        )?;
        let discriminator = Discriminator::new(
            &config.discriminator(),
            derive_seed(seed, TAG_DISCRIMINATOR, 0),
            DType::F32,
            device,
        )?;
        let segmenter = if config.ablation.scat_enabled() {
            Some(SegmentationNet::new(
                &config.segmentation(),
                derive_seed(seed, TAG_SEGMENTER, 0),
                DType::F32,
                device,
            )?)
        } else {
            None
        };
        let opt_g = Adam::new(generator.registry().params(), config.optimizer.generator)?;
        let mut ds_params = discriminator.registry().params().to_vec();
        if let Some(s) = &segmenter {
            ds_params.extend_from_slice(s.registry().params());
        }
        let opt_ds = Adam::new(&ds_params, config.optimizer.discriminator_segmenter)?;
        Ok(Self {
            config: config.clone(),
            step: 0,
            generator,
            discriminator,
            segmenter,
            opt_g,
            opt_ds,
            device: device.clone(),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn segmenter(&self) -> Option<&SegmentationNet> {
        self.segmenter.as_ref()
    }

    fn check_finite(&self, report: &LossReport) -> Result<()> {
        match report.first_non_finite() {
            Some((term, value)) => Err(Error::NonFinite {
                term,
                step: self.step + 1,
                value,
            }),
            None => Ok(()),
        }
    }

    /// One (D, S) update followed by one G update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        self.train_step_observed(batch, |_| {})
    }

    /// [`TrainState::train_step`] with a hook that sees the state between the
    /// (D, S) update and the G update.
    pub fn train_step_observed(
        &mut self,
        batch: &Batch,
        after_ds: impl FnOnce(&TrainState),
    ) -> Result<LossReport> {
        let w: LossWeights = self.config.effective_weights();
        let x = &batch.images;
        let m = &batch.masks;
        let (b, _, _, _) = x.dims4()?;
        let size = self.config.image_size;
        if x.dims() != [b, 3, size, size] || m.dims() != [b, 1, size, size] {
            return Err(Error::domain(format!(
                "batch shapes {:?} / {:?} do not match image_size {size}",
                x.dims(),
                m.dims()
            )));
        }
        let zero = Tensor::zeros((), DType::F32, &self.device)?;
        let mut report = LossReport::default();

        let x_tilde = corrupt(x, m)?;
        let x_hat = self.generator.forward(&x_tilde, m)?;
        let x_bar = compose(&x_hat, &x_tilde, m)?;

        // (D, S) update on the detached composite.
        let x_bar_d = x_bar.detach();
        let pyr = self
            .discriminator
            .forward(&Tensor::cat(&[x, &x_bar_d], 0)?, Mode::Train)?;
        let adv_d = losses::adv_hinge_d(&pyr.last.narrow(0, 0, b)?, &pyr.last.narrow(0, b, b)?)?;
        let scat_s = match &self.segmenter {
            Some(s) => {
                let out = s.forward(&Tensor::cat(&[&x_bar_d, x], 0)?, Mode::Train)?;
                match w.scat_form {
                    ScatForm::Bce => losses::scat_loss_s(
                        &out.prob.narrow(0, 0, b)?,
                        &out.prob.narrow(0, b, b)?,
                        m,
                    )?,
                    ScatForm::Hinge => losses::scat_hinge_s(
                        &out.logits.narrow(0, 0, b)?,
                        &out.logits.narrow(0, b, b)?,
                        m,
                    )?,
                }
            }
            None => zero.clone(),
        };
        let total_ds = losses::total_ds(&adv_d, &scat_s, &w)?;
        report.adv_d = scalar(&adv_d)?;
        report.scat_s = scalar(&scat_s)?;
        report.total_ds = scalar(&total_ds)?;
        self.check_finite(&report)?;
        self.opt_ds.step(&total_ds.backward()?)?;
        after_ds(self);

        // G update; D and S only provide gradients through their inputs.
        let use_text = w.lambda_text > 0.0;
        let use_sem = w.lambda_sem > 0.0;
        // Reference images do not depend on G, so they take a separate,
        // graph-free pass: [x, x̃, x̃_1..x̃_{M-1}].
        let mut refs = Vec::new();
        if use_text || use_sem {
            refs.push(x.clone());
            refs.push(x_tilde.clone());
        }
        if use_sem {
            let extra = w.num_negatives - 1;
            if batch.negative_masks.len() < extra {
                return Err(Error::domain(format!(
                    "semantic loss needs {extra} extra negative masks, batch has {}",
                    batch.negative_masks.len()
                )));
            }
            for nm in &batch.negative_masks[..extra] {
                refs.push(corrupt(x, nm)?);
            }
        }
        let fake: FeaturePyramid = self.discriminator.forward(&x_bar, Mode::Frozen)?;
        let refs = if refs.is_empty() {
            None
        } else {
            Some(self.discriminator.forward(&Tensor::cat(&refs, 0)?, Mode::Frozen)?)
        };
        let adv_g = losses::adv_hinge_g(&fake.last)?;
        let contra_text = match (&refs, use_text) {
            (Some(r), true) => {
                let real = r.narrow(0, b)?;
                let corrupted = r.narrow(b, b)?;
                losses::textural_contrastive(&fake.shallow, &real.shallow, &corrupted.shallow)?
            }
            _ => zero.clone(),
        };
        let contra_sem = match (&refs, use_sem) {
            (Some(r), true) => {
                let emb = r.embedding()?;
                let negs = (0..w.num_negatives)
                    .map(|j| emb.narrow(0, (1 + j) * b, b))
                    .collect::<candle_core::Result<Vec<_>>>()?;
                losses::semantic_contrastive(
                    &fake.embedding()?,
                    &emb.narrow(0, 0, b)?,
                    &Tensor::stack(&negs, 1)?,
                    w.temperature_t,
                )?
            }
            _ => zero.clone(),
        };
        let scat_g = match &self.segmenter {
            Some(s) => {
                let out = s.forward(&x_bar, Mode::Frozen)?;
                match w.scat_form {
                    ScatForm::Bce => losses::scat_loss_g(&out.prob)?,
                    ScatForm::Hinge => losses::scat_hinge_g(&out.logits)?,
                }
            }
            None => zero.clone(),
        };
        let rec = losses::reconstruction(&x_hat, x)?;
        let contra = losses::total_contrastive(&contra_text, &contra_sem, &w)?;
        let total_g = losses::total_generator(&adv_g, &scat_g, &contra, &rec, &w)?;
        report.adv_g = scalar(&adv_g)?;
        report.scat_g = scalar(&scat_g)?;
        report.contra_text = scalar(&contra_text)?;
        report.contra_sem = scalar(&contra_sem)?;
        report.rec = scalar(&rec)?;
        report.total_g = scalar(&total_g)?;
        self.check_finite(&report)?;
        self.opt_g.step(&total_g.backward()?)?;

        self.step += 1;
        Ok(report)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct LogRecord {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossReport,
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Continue from this checkpoint instead of fresh weights.
    pub resume: Option<PathBuf>,
}

/// Output layout of a run.
pub fn config_echo_path(output_dir: &Path) -> PathBuf {
    output_dir.join("config.json")
}

pub fn log_path(output_dir: &Path) -> PathBuf {
    output_dir.join("train_log.jsonl")
}

pub fn checkpoint_path(output_dir: &Path, step: u64) -> PathBuf {
    output_dir.join("checkpoints").join(format!("step_{step:08}.safetensors"))
}

pub fn latest_checkpoint_path(output_dir: &Path) -> PathBuf {
    output_dir.join("checkpoints").join("latest.safetensors")
}

/// The dataset, mask source and batch layout a config describes.
pub fn build_schedule(config: &TrainConfig, device: &Device) -> Result<BatchSchedule> {
    let dataset = Dataset::load(&config.dataset_dir, config.image_size, device)?;
    let masks = match &config.mask_source {
        MaskSource::Generator => MaskSampler::Brush {
            size: config.image_size,
            brush: config.brush.clone(),
        },
        MaskSource::Directory(dir) => MaskSampler::from_directory(dir, config.image_size)?,
    };
    BatchSchedule::new(
        dataset,
        masks,
        config.batch_size,
        config.loss_weights.num_negatives - 1,
        config.seed,
    )
}

/// Runs training to `config.max_steps`, see [`fit_with`].
pub fn fit(config: &TrainConfig) -> Result<TrainState> {
    fit_with(config, &FitOptions::default(), |_, _| {})
}

/// Trains until `config.max_steps`, writing the config echo, an NDJSON log
/// every `log_every` steps and checkpoints every `checkpoint_every` steps
/// plus one at the end. `on_step` sees every step's losses.
pub fn fit_with(
    config: &TrainConfig,
    options: &FitOptions,
    mut on_step: impl FnMut(u64, &LossReport),
) -> Result<TrainState> {
    config.validate()?;
    let device = Device::Cpu;
    let out = &config.output_dir;
    std::fs::create_dir_all(out.join("checkpoints")).map_err(|e| Error::io(out, e))?;
    let echo = config_echo_path(out);
    std::fs::write(&echo, config.to_json()).map_err(|e| Error::io(&echo, e))?;

    let mut state = match &options.resume {
        Some(path) => TrainState::resume(config, path, &device)?,
        None => TrainState::new(config, &device)?,
    };
    if state.step >= config.max_steps {
        return Ok(state);
    }
    let schedule = build_schedule(config, &device)?;
    let log_file = log_path(out);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_file)
        .map_err(|e| Error::io(&log_file, e))?;
    while state.step < config.max_steps {
        let batch = schedule.batch(state.step, &device)?;
        let report = state.train_step(&batch)?;
        let step = state.step;
        on_step(step, &report);
        if step % config.log_every == 0 {
            let line = serde_json::to_string(&LogRecord {
                step,
                losses: report,
            })?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_file, e))?;
            log::info!("{line}");
        }
        let periodic = config.checkpoint_every > 0 && step % config.checkpoint_every == 0;
        if periodic || step == config.max_steps {
            state.save_checkpoint(checkpoint_path(out, step))?;
            state.save_checkpoint(latest_checkpoint_path(out))?;
        }
    }
    Ok(state)
}
