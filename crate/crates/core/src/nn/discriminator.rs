use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{leaky_relu, Builder, Conv2d, ConvSpec, Mode, Registry};
use crate::error::{Error, Result};

const NUM_LAYERS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub final_channels: usize,
    /// Number of shallow layers tapped for the textural loss.
    pub num_taps: usize,
    pub image_size: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            final_channels: 1,
            num_taps: 3,
            image_size: 256,
        }
    }
}

impl DiscriminatorConfig {
    fn specs(&self) -> [ConvSpec; NUM_LAYERS] {
        let c = self.base_channels;
        [
            ConvSpec::new(3, c, 4).stride(2, 1).sn(true),
            ConvSpec::new(c, 2 * c, 4).stride(2, 1).sn(true),
            ConvSpec::new(2 * c, 4 * c, 4).stride(2, 1).sn(true),
            ConvSpec::new(4 * c, 8 * c, 4).stride(1, 1).sn(true),
            ConvSpec::new(8 * c, self.final_channels, 4).stride(1, 1).sn(true),
        ]
    }

    /// Spatial sizes after each layer, derived from the conv arithmetic.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut size = self.image_size;
        self.specs()
            .iter()
            .map(|s| {
                size = s.out_size(size);
                size
            })
            .collect()
    }

    /// Length of the flattened final map used as the semantic embedding.
    pub fn embedding_dim(&self) -> usize {
        let last = *self.layer_sizes().last().expect("five layers");
        self.final_channels * last * last
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.final_channels == 0 {
            return Err(Error::config("discriminator channel counts must be positive"));
        }
        if self.num_taps == 0 || self.num_taps >= NUM_LAYERS {
            return Err(Error::config(format!(
                "discriminator num_taps must be in 1..={}, got {}",
                NUM_LAYERS - 1,
                self.num_taps
            )));
        }
        // three stride-2 layers then two k=4 stride-1 layers that each shrink by one
        if self.image_size < 24 || self.image_size % 8 != 0 {
            return Err(Error::config(format!(
                "discriminator image_size {} must be a multiple of 8 and at least 24",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Discriminator outputs: shallow taps `D_1..D_N` and the final map.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub shallow: Vec<Tensor>,
    /// `[B, C, h, w]` final map; its spatial mean is the hinge critic.
    pub last: Tensor,
}

impl FeaturePyramid {
    /// Final map flattened to `[B, C·h·w]`.
    pub fn embedding(&self) -> Result<Tensor> {
        Ok(self.last.flatten_from(1)?)
    }

    /// Selects batch rows `start..start + len` from every member.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            shallow: self
                .shallow
                .iter()
                .map(|t| t.narrow(0, start, len))
                .collect::<candle_core::Result<_>>()?,
            last: self.last.narrow(0, start, len)?,
        })
    }
}

/// Five-layer strided conv discriminator with spectral norm on every layer.
#[derive(Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    layers: Vec<Conv2d>,
    registry: Registry,
}

impl Discriminator {
    pub fn new(
        config: &DiscriminatorConfig,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new("d", seed, dtype, device);
        let layers = config
            .specs()
            .iter()
            .enumerate()
            .map(|(i, s)| b.conv(&format!("layer{i}"), *s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            layers,
            registry: b.finish(),
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn forward(&self, img: &Tensor, mode: Mode) -> Result<FeaturePyramid> {
        let (_, c, h, w) = img.dims4()?;
        let size = self.config.image_size;
        if (c, h, w) != (3, size, size) {
            return Err(Error::domain(format!(
                "discriminator expects [B,3,{size},{size}], got {:?}",
                img.dims()
            )));
        }
        let mut shallow = Vec::with_capacity(self.config.num_taps);
        let mut xs = img.clone();
        let last_idx = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            xs = layer.forward(&xs, mode)?;
            if i < last_idx {
                xs = leaky_relu(&xs)?;
            }
            if i < self.config.num_taps {
                shallow.push(xs.clone());
            }
        }
        Ok(FeaturePyramid { shallow, last: xs })
    }
}

/// Spatial mean of the final map: one critic value per image, `[B]`.
pub fn critic(pyramid: &FeaturePyramid) -> Result<Tensor> {
    Ok(pyramid.last.flatten_from(1)?.mean(1)?)
}
