//! Checkpoint archives.
//!
//! A checkpoint is one safetensors file. Tensor names:
//!
//! * `g.*`, `d.*`, `s.*`: network parameters (`<layer>.weight`, `<layer>.bias`)
//!   and spectral-norm vectors (`<layer>.sn_u`); `s.*` is absent for the
//!   baseline ablation,
//! * `opt.g.m.<param>`, `opt.g.v.<param>`: generator Adam moments,
//! * `opt.ds.m.<param>`, `opt.ds.v.<param>`: discriminator/segmenter moments.
//!
//! Header metadata: `format`, `step`, `opt_g_steps`, `opt_ds_steps` and
//! `config` (the full training config as JSON).

use std::collections::HashMap;
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;

use super::{derive_seed, TrainConfig, TrainState, TAG_GENERATOR};
use crate::error::{Error, Result};
use crate::nn::{Generator, Registry};

pub const CHECKPOINT_FORMAT: &str = "scat-inpaint-checkpoint/1";

/// Header fields of a checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointInfo {
    pub step: u64,
    pub config: TrainConfig,
    opt_g_steps: u64,
    opt_ds_steps: u64,
}

fn metadata_field<'a>(meta: &'a HashMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::MissingKeys {
            path: path.to_path_buf(),
            missing: vec![format!("__metadata__.{key}")],
        })
}

fn parse_info(bytes: &[u8], path: &Path) -> Result<CheckpointInfo> {
    let (_, header) =
        SafeTensors::read_metadata(bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let empty = HashMap::new();
    let meta = header.metadata().as_ref().unwrap_or(&empty);
    let format = metadata_field(meta, "format", path)?;
    if format != CHECKPOINT_FORMAT {
        return Err(Error::format(path, format!("unknown checkpoint format {format:?}")));
    }
    let number = |key: &str| -> Result<u64> {
        metadata_field(meta, key, path)?
            .parse()
            .map_err(|_| Error::format(path, format!("metadata {key} is not an integer")))
    };
    let config: TrainConfig = serde_json::from_str(metadata_field(meta, "config", path)?)
        .map_err(|e| Error::format(path, format!("embedded config: {e}")))?;
    Ok(CheckpointInfo {
        step: number("step")?,
        config,
        opt_g_steps: number("opt_g_steps")?,
        opt_ds_steps: number("opt_ds_steps")?,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint_info(path: impl AsRef<Path>) -> Result<CheckpointInfo> {
    let path = path.as_ref();
    parse_info(&read_file(path)?, path)
}

struct Archive<'a> {
    path: &'a Path,
    tensors: SafeTensors<'a>,
    device: Device,
    missing: Vec<String>,
}

impl<'a> Archive<'a> {
    fn open(bytes: &'a [u8], path: &'a Path, device: &Device) -> Result<Self> {
        let tensors =
            SafeTensors::deserialize(bytes).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self {
            path,
            tensors,
            device: device.clone(),
            missing: Vec::new(),
        })
    }

    fn get(&mut self, name: &str) -> Result<Option<Tensor>> {
        match self.tensors.tensor(name) {
            Ok(view) => Ok(Some(view.load(&self.device)?.to_dtype(DType::F32)?)),
            Err(_) => {
                self.missing.push(name.to_string());
                Ok(None)
            }
        }
    }

    fn fill(&mut self, registry: &Registry) -> Result<()> {
        for (name, var) in registry.params() {
            if let Some(t) = self.get(name)? {
                if t.dims() != var.dims() {
                    return Err(Error::ConfigMismatch(format!(
                        "{}: {name} has shape {:?}, model expects {:?}",
                        self.path.display(),
                        t.dims(),
                        var.dims()
                    )));
                }
                var.set(&t)?;
            }
        }
        for (name, current) in registry.buffers() {
            if let Some(t) = self.get(&name)? {
                if t.dims() != current.dims() {
                    return Err(Error::ConfigMismatch(format!(
                        "{}: {name} has shape {:?}, model expects {:?}",
                        self.path.display(),
                        t.dims(),
                        current.dims()
                    )));
                }
                registry.set_buffer(&name, t);
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if self.missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingKeys {
                path: self.path.to_path_buf(),
                missing: self.missing,
            })
        }
    }
}

fn check_compatible(stored: &TrainConfig, wanted: &TrainConfig, path: &Path) -> Result<()> {
    if stored.image_size != wanted.image_size {
        return Err(Error::ConfigMismatch(format!(
            "{} was trained at image_size {}, config asks for {}",
            path.display(),
            stored.image_size,
            wanted.image_size
        )));
    }
    if stored.model != wanted.model {
        return Err(Error::ConfigMismatch(format!(
            "{} has model {:?}, config asks for {:?}",
            path.display(),
            stored.model,
            wanted.model
        )));
    }
    Ok(())
}

impl TrainState {
    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut registries = vec![self.generator.registry(), self.discriminator.registry()];
        if let Some(s) = &self.segmenter {
            registries.push(s.registry());
        }
        for r in registries {
            out.extend(r.params().iter().map(|(n, v)| (n.clone(), v.as_tensor().clone())));
            out.extend(r.buffers());
        }
        out.extend(self.opt_g.state().into_iter().map(|(k, t)| (format!("opt.g.{k}"), t)));
        out.extend(self.opt_ds.state().into_iter().map(|(k, t)| (format!("opt.ds.{k}"), t)));
        out
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let meta = HashMap::from([
            ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
            ("step".to_string(), self.step.to_string()),
            ("opt_g_steps".to_string(), self.opt_g.steps().to_string()),
            ("opt_ds_steps".to_string(), self.opt_ds.steps().to_string()),
            ("config".to_string(), serde_json::to_string(&self.config)?),
        ]);
        // Write then rename so a crash never leaves a truncated archive.
        let tmp = path.with_extension("safetensors.tmp");
        safetensors::serialize_to_file(self.named_tensors(), Some(meta), &tmp)
            .map_err(|e| Error::format(&tmp, e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Restores a state using the config stored in the checkpoint.
    pub fn load_checkpoint(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        let info = parse_info(&bytes, path)?;
        Self::restore(&info.config.clone(), &info, &bytes, path, device)
    }

    /// Restores a checkpoint into a state built from `config`. Architecture
    /// or image size differences are a [`Error::ConfigMismatch`]; tensors the
    /// config needs but the file lacks are reported as [`Error::MissingKeys`].
    pub fn resume(config: &TrainConfig, path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        let info = parse_info(&bytes, path)?;
        check_compatible(&info.config, config, path)?;
        Self::restore(config, &info, &bytes, path, device)
    }

    fn restore(
        config: &TrainConfig,
        info: &CheckpointInfo,
        bytes: &[u8],
        path: &Path,
        device: &Device,
    ) -> Result<Self> {
        let mut state = Self::new(config, device)?;
        let mut archive = Archive::open(bytes, path, device)?;
        archive.fill(state.generator.registry())?;
        archive.fill(state.discriminator.registry())?;
        if let Some(s) = &state.segmenter {
            archive.fill(s.registry())?;
        }
        for (prefix, opt, steps) in [
            ("opt.g.", &mut state.opt_g, info.opt_g_steps),
            ("opt.ds.", &mut state.opt_ds, info.opt_ds_steps),
        ] {
            let mut lookup_err = None;
            let result = opt.load_state(steps, |k| {
                let name = format!("{prefix}{k}");
                match archive.tensors.tensor(&name) {
                    Ok(view) => match view.load(device).and_then(|t| t.to_dtype(DType::F32)) {
                        Ok(t) => Some(t),
                        Err(e) => {
                            lookup_err = Some(e);
                            None
                        }
                    },
                    Err(_) => None,
                }
            });
            if let Some(e) = lookup_err {
                return Err(e.into());
            }
            if let Err(missing) = result {
                archive
                    .missing
                    .extend(missing.into_iter().map(|k| format!("{prefix}{k}")));
            }
        }
        archive.finish()?;
        state.step = info.step;
        Ok(state)
    }
}

/// Loads only the generator, for inference.
pub fn load_generator(path: impl AsRef<Path>, device: &Device) -> Result<(Generator, CheckpointInfo)> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let info = parse_info(&bytes, path)?;
    let generator = Generator::new(
        &info.config.generator(),
        derive_seed(info.config.seed, TAG_GENERATOR, 0),
        DType::F32,
        device,
    )?;
    let mut archive = Archive::open(&bytes, path, device)?;
    archive.fill(generator.registry())?;
    archive.finish()?;
    Ok((generator, info))
}
