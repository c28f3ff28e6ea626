use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{sigmoid, Builder, Conv2d, ConvSpec, Mode, Registry};
use crate::error::{Error, Result};

/// Spatial reduction between the generator's input and its bottleneck.
pub const GENERATOR_DOWNSAMPLING: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub num_blocks: usize,
    pub dilation_rates: Vec<usize>,
    pub image_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            num_blocks: 8,
            dilation_rates: vec![1, 2, 4, 8],
            image_size: 256,
        }
    }
}

impl GeneratorConfig {
    pub fn bottleneck_channels(&self) -> usize {
        4 * self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.num_blocks == 0 {
            return Err(Error::config(
                "generator needs base_channels >= 1 and num_blocks >= 1",
            ));
        }
        if self.dilation_rates.is_empty() || self.dilation_rates.contains(&0) {
            return Err(Error::config(
                "generator dilation_rates must be nonempty and positive",
            ));
        }
        if self.bottleneck_channels() % self.dilation_rates.len() != 0 {
            return Err(Error::config(format!(
                "{} bottleneck channels cannot be split into {} dilation groups",
                self.bottleneck_channels(),
                self.dilation_rates.len()
            )));
        }
        if self.image_size == 0 || self.image_size % GENERATOR_DOWNSAMPLING != 0 {
            return Err(Error::config(format!(
                "image_size {} is not divisible by the generator downsampling factor {}",
                self.image_size, GENERATOR_DOWNSAMPLING
            )));
        }
        Ok(())
    }
}

/// Residual block that aggregates parallel dilated convolutions and merges
/// them back into the input through a learned per-pixel gate.
#[derive(Debug)]
struct AotBlock {
    branches: Vec<Conv2d>,
    fuse: Conv2d,
    gate: Conv2d,
}

impl AotBlock {
    fn new(b: &mut Builder, name: &str, dim: usize, rates: &[usize]) -> Result<Self> {
        let group = dim / rates.len();
        let branches = rates
            .iter()
            .map(|&r| b.conv(&format!("{name}.branch{r}"), ConvSpec::new(dim, group, 3).dilation(r)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            branches,
            fuse: b.conv(&format!("{name}.fuse"), ConvSpec::new(dim, dim, 1))?,
            gate: b.conv(&format!("{name}.gate"), ConvSpec::new(dim, dim, 3))?,
        })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let parts = self
            .branches
            .iter()
            .map(|c| Ok(c.forward(xs, Mode::Eval)?.relu()?))
            .collect::<Result<Vec<_>>>()?;
        let fused = self.fuse.forward(&Tensor::cat(&parts, 1)?, Mode::Eval)?;
        let gate = sigmoid(&self.gate.forward(xs, Mode::Eval)?)?;
        let keep = (gate.ones_like()? - &gate)?;
        Ok(((xs * keep)? + (fused * gate)?)?)
    }
}

/// Inpainting generator: encoder, a stack of AOT-style blocks, decoder.
#[derive(Debug)]
pub struct Generator {
    config: GeneratorConfig,
    enc: [Conv2d; 3],
    blocks: Vec<AotBlock>,
    dec: [Conv2d; 2],
    head: Conv2d,
    registry: Registry,
}

impl Generator {
    pub fn new(config: &GeneratorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let mut b = Builder::new("g", seed, dtype, device);
        let enc = [
            b.conv("enc0", ConvSpec::new(4, c, 7))?,
            b.conv("enc1", ConvSpec::new(c, 2 * c, 4).stride(2, 1))?,
            b.conv("enc2", ConvSpec::new(2 * c, 4 * c, 4).stride(2, 1))?,
        ];
        let blocks = (0..config.num_blocks)
            .map(|i| AotBlock::new(&mut b, &format!("block{i}"), 4 * c, &config.dilation_rates))
            .collect::<Result<Vec<_>>>()?;
        let dec = [
            b.conv("dec0", ConvSpec::new(4 * c, 2 * c, 3))?,
            b.conv("dec1", ConvSpec::new(2 * c, c, 3))?,
        ];
        let head = b.conv("head", ConvSpec::new(c, 3, 3))?;
        Ok(Self {
            config: config.clone(),
            enc,
            blocks,
            dec,
            head,
            registry: b.finish(),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    /// `x̂ = G(x̃, m)`. `x_tilde` is `[B, 3, H, W]` in `[-1, 1]`, `mask` is
    /// `[B, 1, H, W]` (any dtype, 1 = valid). Output is `[B, 3, H, W]` in `[-1, 1]`.
    pub fn forward(&self, x_tilde: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (bsz, c, h, w) = x_tilde.dims4()?;
        if c != 3 || mask.dims() != [bsz, 1, h, w] {
            return Err(Error::domain(format!(
                "generator expects [B,3,H,W] image and [B,1,H,W] mask, got {:?} and {:?}",
                x_tilde.dims(),
                mask.dims()
            )));
        }
        if h % GENERATOR_DOWNSAMPLING != 0 || w % GENERATOR_DOWNSAMPLING != 0 {
            return Err(Error::config(format!(
                "input {h}x{w} is not divisible by the generator downsampling factor {GENERATOR_DOWNSAMPLING}"
            )));
        }
        let mask = mask.to_dtype(x_tilde.dtype())?;
        let mut xs = Tensor::cat(&[x_tilde, &mask], 1)?;
        for conv in &self.enc {
            xs = conv.forward(&xs, Mode::Eval)?.relu()?;
        }
        for block in &self.blocks {
            xs = block.forward(&xs)?;
        }
        for conv in &self.dec {
            let (_, _, h, w) = xs.dims4()?;
            xs = xs.upsample_nearest2d(2 * h, 2 * w)?;
            xs = conv.forward(&xs, Mode::Eval)?.relu()?;
        }
        Ok(self.head.forward(&xs, Mode::Eval)?.tanh()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 4,
            num_blocks: 2,
            dilation_rates: vec![1, 2, 4, 8],
            image_size: 32,
        }
    }

    fn input(seed: u64, b: usize, size: usize) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f32> = (0..b * 3 * size * size)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let m: Vec<f32> = (0..b * size * size)
            .map(|_| rng.random_range(0..2) as f32)
            .collect();
        (
            Tensor::from_vec(x, (b, 3, size, size), &Device::Cpu).unwrap(),
            Tensor::from_vec(m, (b, 1, size, size), &Device::Cpu).unwrap(),
        )
    }

    #[test]
    fn shape_and_range() {
        let g = Generator::new(&tiny(), 0, DType::F32, &Device::Cpu).unwrap();
        let (x, m) = input(1, 2, 32);
        let y = g.forward(&x, &m).unwrap();
        assert_eq!(y.dims(), &[2, 3, 32, 32]);
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|v| (-1.0..=1.0).contains(v)));
        // fully convolutional: other sizes divisible by 4 work too
        let (x, m) = input(2, 1, 20);
        assert_eq!(g.forward(&x, &m).unwrap().dims(), &[1, 3, 20, 20]);
    }

    #[test]
    fn indivisible_input_is_a_config_error() {
        let g = Generator::new(&tiny(), 0, DType::F32, &Device::Cpu).unwrap();
        let (x, m) = input(1, 1, 30);
        assert!(matches!(g.forward(&x, &m), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.image_size = 30;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.dilation_rates = vec![1, 2, 3];
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.num_blocks = 0;
        assert!(c.validate().is_err());
        GeneratorConfig::default().validate().unwrap();
    }

    #[test]
    fn same_seed_same_network() {
        let a = Generator::new(&tiny(), 5, DType::F32, &Device::Cpu).unwrap();
        let b = Generator::new(&tiny(), 5, DType::F32, &Device::Cpu).unwrap();
        let (x, m) = input(3, 1, 32);
        let ya = a.forward(&x, &m).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let yb = b.forward(&x, &m).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(ya, yb);
    }

    #[test]
    fn no_layer_is_spectrally_normalized() {
        let g = Generator::new(&tiny(), 0, DType::F32, &Device::Cpu).unwrap();
        assert!(!g.registry().layers().is_empty());
        assert!(g.registry().layers().iter().all(|l| !l.spectral_norm));
        assert!(g.registry().buffers().is_empty());
    }
}
