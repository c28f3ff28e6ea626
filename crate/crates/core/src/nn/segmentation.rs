use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{leaky_relu, sigmoid, Builder, Conv2d, ConvSpec, Mode, Registry};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-6;

const DEPTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationConfig {
    pub base_channels: usize,
    pub image_size: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            image_size: 256,
        }
    }
}

impl SegmentationConfig {
    fn widths(&self) -> [usize; DEPTH + 1] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c, 8 * c]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::config("segmentation base_channels must be positive"));
        }
        if self.image_size == 0 || self.image_size % (1 << DEPTH) != 0 {
            return Err(Error::config(format!(
                "segmentation image_size {} must be a multiple of {}",
                self.image_size,
                1 << DEPTH
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationOutput {
    /// Pre-sigmoid scores `[B, 1, H, W]`, used by the hinge form.
    pub logits: Tensor,
    /// Clamped sigmoid probabilities `[B, 1, H, W]`; 1 means "valid".
    pub prob: Tensor,
}

#[derive(Debug)]
struct Stage {
    a: Conv2d,
    b: Conv2d,
}

impl Stage {
    fn forward(&self, xs: &Tensor, mode: Mode) -> Result<Tensor> {
        let xs = leaky_relu(&self.a.forward(xs, mode)?)?;
        leaky_relu(&self.b.forward(&xs, mode)?)
    }
}

/// U-net with four downsampling and four upsampling stages joined by skips.
#[derive(Debug)]
pub struct SegmentationNet {
    config: SegmentationConfig,
    inc: Stage,
    down: Vec<Stage>,
    up: Vec<Conv2d>,
    head: Conv2d,
    registry: Registry,
}

impl SegmentationNet {
    pub fn new(
        config: &SegmentationConfig,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        let w = config.widths();
        let mut b = Builder::new("s", seed, dtype, device);
        let inc = Stage {
            a: b.conv("inc.a", ConvSpec::new(3, w[0], 3).sn(true))?,
            b: b.conv("inc.b", ConvSpec::new(w[0], w[0], 3).sn(true))?,
        };
        let mut down = Vec::with_capacity(DEPTH);
        for i in 1..=DEPTH {
            down.push(Stage {
                a: b.conv(
                    &format!("down{i}.a"),
                    ConvSpec::new(w[i - 1], w[i], 4).stride(2, 1).sn(true),
                )?,
                b: b.conv(&format!("down{i}.b"), ConvSpec::new(w[i], w[i], 3).sn(true))?,
            });
        }
        let mut up = Vec::with_capacity(DEPTH);
        for i in (1..=DEPTH).rev() {
            up.push(b.conv(
                &format!("up{i}"),
                ConvSpec::new(w[i] + w[i - 1], w[i - 1], 3).sn(true),
            )?);
        }
        let head = b.conv("head", ConvSpec::new(w[0], 1, 1).sn(true))?;
        Ok(Self {
            config: config.clone(),
            inc,
            down,
            up,
            head,
            registry: b.finish(),
        })
    }

    pub fn config(&self) -> &SegmentationConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn forward(&self, img: &Tensor, mode: Mode) -> Result<SegmentationOutput> {
        let (_, c, h, w) = img.dims4()?;
        let size = self.config.image_size;
        if (c, h, w) != (3, size, size) {
            return Err(Error::domain(format!(
                "segmentation network expects [B,3,{size},{size}], got {:?}",
                img.dims()
            )));
        }
        let mut skips = vec![self.inc.forward(img, mode)?];
        for stage in &self.down {
            let next = stage.forward(skips.last().expect("nonempty"), mode)?;
            skips.push(next);
        }
        let mut xs = skips.pop().expect("bottleneck");
        for conv in &self.up {
            let skip = skips.pop().expect("one skip per up stage");
            let (_, _, sh, sw) = skip.dims4()?;
            let upsampled = xs.upsample_nearest2d(sh, sw)?;
            xs = leaky_relu(&conv.forward(&Tensor::cat(&[&upsampled, &skip], 1)?, mode)?)?;
        }
        let logits = self.head.forward(&xs, mode)?;
        let prob = sigmoid(&logits)?.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
        Ok(SegmentationOutput { logits, prob })
    }
}
