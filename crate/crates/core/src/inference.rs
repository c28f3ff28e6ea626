//! Single-image inpainting with a trained generator.
//!
//! The composite copies valid pixels straight from the input bytes, so they
//! come back bit-identical whatever the model does.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::imageio::{rgb_to_tensor, tensor_to_rgb};
use crate::mask::{corrupt, Mask};
use crate::nn::{Generator, GENERATOR_DOWNSAMPLING};
use crate::trainer::{load_generator, CheckpointInfo};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InpaintOptions {
    /// Return the raw generator output instead of the composite.
    pub return_raw: bool,
    /// Allow resizing: a mask of another size is resized (nearest) to the
    /// image, and an image the generator cannot take directly is run at the
    /// model's training size and scaled back.
    pub resize: bool,
}

/// Why an input could not be processed as given.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SizeError {
    #[error("image is {image:?} but mask is {mask:?}")]
    MaskMismatch {
        image: (u32, u32),
        mask: (u32, u32),
    },
    #[error("image size {0:?} is not a multiple of {GENERATOR_DOWNSAMPLING}")]
    Indivisible((u32, u32)),
}

pub struct Inpainter {
    generator: Generator,
    info: CheckpointInfo,
    device: Device,
}

impl Inpainter {
    pub fn load(checkpoint: impl AsRef<Path>) -> Result<Self> {
        let device = Device::Cpu;
        let (generator, info) = load_generator(checkpoint, &device)?;
        Ok(Self {
            generator,
            info,
            device,
        })
    }

    pub fn from_generator(generator: Generator, info: CheckpointInfo) -> Self {
        Self {
            generator,
            info,
            device: Device::Cpu,
        }
    }

    pub fn info(&self) -> &CheckpointInfo {
        &self.info
    }

    pub fn image_size(&self) -> usize {
        self.info.config.image_size
    }

    /// Checks sizes without running the model.
    pub fn check(&self, image: &RgbImage, mask: &Mask, opts: InpaintOptions) -> std::result::Result<(), SizeError> {
        let dims = image.dimensions();
        let mask_dims = (mask.width() as u32, mask.height() as u32);
        if dims != mask_dims && !opts.resize {
            return Err(SizeError::MaskMismatch {
                image: dims,
                mask: mask_dims,
            });
        }
        let step = GENERATOR_DOWNSAMPLING as u32;
        if (dims.0 % step != 0 || dims.1 % step != 0) && !opts.resize {
            return Err(SizeError::Indivisible(dims));
        }
        Ok(())
    }

    /// Runs the generator and returns the composite (or raw output).
    pub fn inpaint(&self, image: &RgbImage, mask: &Mask, opts: InpaintOptions) -> Result<RgbImage> {
        self.check(image, mask, opts)
            .map_err(|e| Error::domain(e.to_string()))?;
        let (w, h) = image.dimensions();
        let mask = if (mask.width() as u32, mask.height() as u32) != (w, h) {
            resize_mask(mask, w, h)?
        } else {
            mask.clone()
        };
        let step = GENERATOR_DOWNSAMPLING as u32;
        let native = w % step == 0 && h % step == 0;
        let raw = if native {
            self.run(image, &mask)?
        } else {
            let s = self.image_size() as u32;
            let small_img = image::imageops::resize(image, s, s, FilterType::Triangle);
            let small_mask = resize_mask(&mask, s, s)?;
            let out = self.run(&small_img, &small_mask)?;
            image::imageops::resize(&out, w, h, FilterType::Triangle)
        };
        if opts.return_raw {
            return Ok(raw);
        }
        Ok(composite(image, &raw, &mask))
    }

    fn run(&self, image: &RgbImage, mask: &Mask) -> Result<RgbImage> {
        let x = rgb_to_tensor(image, &self.device)?.unsqueeze(0)?;
        let m = mask.to_tensor(&self.device)?.unsqueeze(0)?;
        let x_tilde = corrupt(&x, &m)?;
        let x_hat: Tensor = self.generator.forward(&x_tilde, &m)?;
        tensor_to_rgb(&x_hat.squeeze(0)?)
    }
}

/// Valid pixels from `source`, hole pixels from `generated`.
pub fn composite(source: &RgbImage, generated: &RgbImage, mask: &Mask) -> RgbImage {
    RgbImage::from_fn(source.width(), source.height(), |x, y| {
        if mask.is_valid(y as usize, x as usize) {
            *source.get_pixel(x, y)
        } else {
            *generated.get_pixel(x, y)
        }
    })
}

fn resize_mask(mask: &Mask, w: u32, h: u32) -> Result<Mask> {
    let gray: GrayImage =
        image::imageops::resize(&mask.to_gray_image(), w, h, FilterType::Nearest);
    Mask::from_values(
        h as usize,
        w as usize,
        gray.into_raw().into_iter().map(|v| (v >= 128) as u8).collect(),
    )
}
