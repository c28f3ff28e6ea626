use std::path::Path;

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::{list_images, load_rgb, rgb_to_tensor, square_resize};
use crate::mask::{generate_freeform_mask, stack_masks, BrushParams, Mask};

const TAG_EPOCH: u64 = 0x45;
const TAG_MASK: u64 = 0x4d;
const TAG_NEGATIVE: u64 = 0x4e;

/// Mixes a base seed with a tag and an index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Training images as `[3, S, S]` tensors in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<Tensor>,
}

impl Dataset {
    /// Loads every image in `dir`, center-cropped and resized to `size`.
    pub fn load(dir: impl AsRef<Path>, size: usize, device: &Device) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::config(format!(
                "dataset directory {} does not exist",
                dir.display()
            )));
        }
        let images = list_images(dir)?
            .iter()
            .map(|p| rgb_to_tensor(&square_resize(&load_rgb(p)?, size as u32), device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { images })
    }

    pub fn from_tensors(images: Vec<Tensor>) -> Self {
        Self { images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Produces one mask per seed.
#[derive(Debug, Clone)]
pub enum MaskSampler {
    Brush { size: usize, brush: BrushParams },
    Pool(Vec<Mask>),
}

impl MaskSampler {
    /// Loads every PNG in `dir`; masks of another size are resized with
    /// nearest-neighbour sampling.
    pub fn from_directory(dir: impl AsRef<Path>, size: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let files = list_images(dir)?;
        if files.is_empty() {
            return Err(Error::config(format!("mask directory {} has no images", dir.display())));
        }
        let masks = files
            .iter()
            .map(|p| {
                let m = Mask::load(p, false)?;
                if (m.height(), m.width()) == (size, size) {
                    return Ok(m);
                }
                let resized = image::imageops::resize(
                    &m.to_gray_image(),
                    size as u32,
                    size as u32,
                    FilterType::Nearest,
                );
                Mask::from_values(
                    size,
                    size,
                    resized.into_raw().into_iter().map(|v| (v >= 128) as u8).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::Pool(masks))
    }

    pub fn sample(&self, seed: u64) -> Result<Mask> {
        match self {
            Self::Brush { size, brush } => generate_freeform_mask(*size, *size, seed, brush),
            Self::Pool(masks) => Ok(masks[(seed % masks.len() as u64) as usize].clone()),
        }
    }
}

/// One training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Ground truth `[B, 3, S, S]`.
    pub images: Tensor,
    /// `[B, 1, S, S]` u8, 1 = valid.
    pub masks: Tensor,
    /// Extra masks for the semantic negatives, each `[B, 1, S, S]`.
    pub negative_masks: Vec<Tensor>,
}

/// Deterministic batch schedule: epoch-wise shuffles, a fresh mask for every
/// sample visit and fresh negative masks every step, all derived from
/// `(seed, step)` so a resumed run sees the same data.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    dataset: Dataset,
    masks: MaskSampler,
    batch_size: usize,
    num_negative_masks: usize,
    seed: u64,
}

impl BatchSchedule {
    pub fn new(
        dataset: Dataset,
        masks: MaskSampler,
        batch_size: usize,
        num_negative_masks: usize,
        seed: u64,
    ) -> Result<Self> {
        if dataset.len() < batch_size {
            return Err(Error::config(format!(
                "dataset has {} images, fewer than batch_size {batch_size}",
                dataset.len()
            )));
        }
        Ok(Self {
            dataset,
            masks,
            batch_size,
            num_negative_masks,
            seed,
        })
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, TAG_EPOCH, epoch)));
        order
    }

    /// Batch for the zero-based step index `step`.
    pub fn batch(&self, step: u64, device: &Device) -> Result<Batch> {
        let n = self.dataset.len() as u64;
        let b = self.batch_size as u64;
        let mut images = Vec::with_capacity(self.batch_size);
        let mut masks = Vec::with_capacity(self.batch_size);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for visit in step * b..(step + 1) * b {
            let epoch = visit / n;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                cached = Some((epoch, self.permutation(epoch)));
            }
            let order = &cached.as_ref().expect("just set").1;
            images.push(self.dataset.images[order[(visit % n) as usize]].clone());
            masks.push(self.masks.sample(derive_seed(self.seed, TAG_MASK, visit))?);
        }
        let mut negative_masks = Vec::with_capacity(self.num_negative_masks);
        for j in 0..self.num_negative_masks as u64 {
            let base = derive_seed(self.seed, TAG_NEGATIVE, step * 1024 + j);
            let set = (0..b)
                .map(|i| self.masks.sample(derive_seed(base, TAG_MASK, i)))
                .collect::<Result<Vec<_>>>()?;
            negative_masks.push(stack_masks(&set, device)?);
        }
        Ok(Batch {
            images: Tensor::stack(&images, 0)?.to_device(device)?,
            masks: stack_masks(&masks, device)?,
            negative_masks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(n: usize) -> Dataset {
        Dataset::from_tensors(
            (0..n)
                .map(|i| Tensor::full(i as f32, (3, 8, 8), &Device::Cpu).unwrap())
                .collect(),
        )
    }

    fn schedule(n: usize, b: usize) -> BatchSchedule {
        let masks = MaskSampler::Brush {
            size: 8,
            brush: BrushParams::default(),
        };
        BatchSchedule::new(dataset(n), masks, b, 2, 7).unwrap()
    }

    fn ids(batch: &Batch) -> Vec<f32> {
        batch
            .images
            .mean((1, 2, 3))
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
    }

    #[test]
    fn every_image_once_per_epoch() {
        let s = schedule(6, 2);
        let mut seen: Vec<f32> = (0..3).flat_map(|k| ids(&s.batch(k, &Device::Cpu).unwrap())).collect();
        seen.sort_by(f32::total_cmp);
        assert_eq!(seen, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn batches_are_reproducible() {
        let s = schedule(5, 2);
        let a = s.batch(4, &Device::Cpu).unwrap();
        let b = s.batch(4, &Device::Cpu).unwrap();
        assert_eq!(ids(&a), ids(&b));
        let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<u8>().unwrap();
        assert_eq!(flat(&a.masks), flat(&b.masks));
        assert_eq!(a.negative_masks.len(), 2);
        assert_eq!(a.negative_masks[0].dims(), &[2, 1, 8, 8]);
        let c = s.batch(5, &Device::Cpu).unwrap();
        assert_ne!(flat(&a.negative_masks[0]), flat(&c.negative_masks[0]));
    }

    #[test]
    fn too_small_dataset_is_a_config_error() {
        let masks = MaskSampler::Brush {
            size: 8,
            brush: BrushParams::default(),
        };
        let err = BatchSchedule::new(dataset(3), masks, 4, 0, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn seed_derivation_separates_streams() {
        assert_ne!(derive_seed(1, TAG_MASK, 0), derive_seed(1, TAG_NEGATIVE, 0));
        assert_ne!(derive_seed(1, TAG_MASK, 0), derive_seed(2, TAG_MASK, 0));
        assert_ne!(derive_seed(1, TAG_MASK, 0), derive_seed(1, TAG_MASK, 1));
    }
}
