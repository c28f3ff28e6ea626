//! The three trainable networks and the layer plumbing they share.
//!
//! Parameters are created from a seeded generator so that two networks built
//! from the same config and seed are bit-identical. Every network keeps a
//! [`Registry`] of its named parameters, spectral-norm state buffers and
//! layers; the optimizer and checkpoint code work off that registry.

mod conv_op;
mod discriminator;
mod generator;
mod segmentation;
mod spectral;

use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use discriminator::{critic, Discriminator, DiscriminatorConfig, FeaturePyramid};
pub use generator::{Generator, GeneratorConfig, GENERATOR_DOWNSAMPLING};
pub use segmentation::{SegmentationConfig, SegmentationNet, SegmentationOutput, PROB_CLAMP};
pub use spectral::{spectral_normalize, SpectralNorm, SN_EPS};

use crate::error::Result;

/// Training forwards run power iterations; evaluation forwards are pure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    /// Like `Eval`, with parameters detached: gradients reach the input only.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub spectral_norm: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Registry {
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Arc<Mutex<Tensor>>)>,
    layers: Vec<LayerInfo>,
}

impl Registry {
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        self.buffers
            .iter()
            .map(|(n, b)| (n.clone(), b.lock().expect("sn buffer lock").clone()))
            .collect()
    }

    pub fn set_buffer(&self, name: &str, value: Tensor) -> bool {
        match self.buffers.iter().find(|(n, _)| n == name) {
            Some((_, slot)) => {
                *slot.lock().expect("sn buffer lock") = value;
                true
            }
            None => false,
        }
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Copies of all parameter values, for snapshot comparisons.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        Ok(self
            .params
            .iter()
            .map(|(_, v)| v.as_tensor().copy())
            .collect::<candle_core::Result<_>>()?)
    }
}

/// Seeded parameter factory used while constructing a network.
pub(crate) struct Builder {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    prefix: String,
    registry: Registry,
}

impl Builder {
    pub(crate) fn new(prefix: &str, seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
            prefix: prefix.to_string(),
            registry: Registry::default(),
        }
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub(crate) fn conv(&mut self, name: &str, spec: ConvSpec) -> Result<Conv2d> {
        let full = format!("{}.{}", self.prefix, name);
        let fan_in = spec.c_in * spec.kernel * spec.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = self.uniform(&[spec.c_out, spec.c_in, spec.kernel, spec.kernel], bound)?;
        let bias = self.uniform(&[spec.c_out], bound)?;
        self.registry
            .params
            .push((format!("{full}.weight"), weight.clone()));
        self.registry
            .params
            .push((format!("{full}.bias"), bias.clone()));
        let sn = if spec.spectral_norm {
            let u: Vec<f64> = (0..spec.c_out)
                .map(|_| self.rng.random_range(-1.0..1.0))
                .collect();
            let u = Tensor::from_vec(u, spec.c_out, &self.device)?.to_dtype(self.dtype)?;
            let u = (&u / u.sqr()?.sum_all()?.sqrt()?.to_scalar_f64()?)?;
            let sn = SpectralNorm::new(u);
            self.registry
                .buffers
                .push((format!("{full}.sn_u"), sn.state()));
            Some(sn)
        } else {
            None
        };
        self.registry.layers.push(LayerInfo {
            name: full,
            spectral_norm: spec.spectral_norm,
        });
        Ok(Conv2d {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
            sn,
        })
    }

    pub(crate) fn finish(self) -> Registry {
        self.registry
    }
}

trait ToScalarF64 {
    fn to_scalar_f64(&self) -> candle_core::Result<f64>;
}

impl ToScalarF64 for Tensor {
    fn to_scalar_f64(&self) -> candle_core::Result<f64> {
        self.to_dtype(DType::F64)?.to_scalar::<f64>()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub spectral_norm: bool,
}

impl ConvSpec {
    pub(crate) fn new(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            spectral_norm: false,
        }
    }

    pub(crate) fn stride(mut self, stride: usize, padding: usize) -> Self {
        self.stride = stride;
        self.padding = padding;
        self
    }

    pub(crate) fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * (self.kernel / 2);
        self
    }

    pub(crate) fn sn(mut self, on: bool) -> Self {
        self.spectral_norm = on;
        self
    }

    /// Output spatial size for an input of `size`.
    pub(crate) fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }
}

#[derive(Debug)]
pub(crate) struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
    dilation: usize,
    sn: Option<SpectralNorm>,
}

impl Conv2d {
    pub(crate) fn forward(&self, xs: &Tensor, mode: Mode) -> Result<Tensor> {
        let (weight, bias) = match mode {
            Mode::Frozen => (self.weight.as_tensor().detach(), self.bias.as_tensor().detach()),
            _ => (self.weight.as_tensor().clone(), self.bias.as_tensor().clone()),
        };
        let weight = match &self.sn {
            Some(sn) => sn.normalized(&weight, mode)?,
            None => weight,
        };
        let ys = conv_op::conv2d(xs, &weight, self.padding, self.stride, self.dilation)?;
        let bias = bias.reshape((1, (), 1, 1))?;
        Ok(ys.broadcast_add(&bias)?)
    }
}

pub(crate) fn leaky_relu(xs: &Tensor) -> Result<Tensor> {
    let zeros = xs.zeros_like()?;
    Ok((xs.maximum(&zeros)? + (xs.minimum(&zeros)? * 0.2)?)?)
}

pub(crate) fn sigmoid(xs: &Tensor) -> Result<Tensor> {
    // tanh form: no overflow for large |x| and a finite gradient everywhere
    Ok((((xs * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}
