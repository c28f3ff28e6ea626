use std::path::{Path, PathBuf};

use candle_core::safetensors::Load;
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::PlanarImage;
use crate::nn::{Builder, Conv2d, ConvSpec, Mode, Registry};

/// Maps an image to a fixed-length embedding for FID statistics.
pub trait FeatureExtractor: Send + Sync {
    fn identifier(&self) -> &str;
    fn embedding_dim(&self) -> usize;
    fn embed(&self, image: &PlanarImage) -> Result<Vec<f64>>;
}

const WIDTHS: [usize; 2] = [32, 64];
const DEFAULT_DIM: usize = 64;
const DEFAULT_SEED: u64 = 0x5eed;

/// Describes which extractor to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorHandle {
    pub identifier: String,
    pub embedding_dim: usize,
    pub weights_path: Option<PathBuf>,
}

impl Default for ExtractorHandle {
    fn default() -> Self {
        Self {
            identifier: format!("random-conv-{DEFAULT_SEED}"),
            embedding_dim: DEFAULT_DIM,
            weights_path: None,
        }
    }
}

impl ExtractorHandle {
    pub fn weights(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        Self {
            identifier: format!("conv:{}", path.display()),
            embedding_dim: 0,
            weights_path: Some(path),
        }
    }

    pub fn open(&self) -> Result<ConvExtractor> {
        match &self.weights_path {
            Some(p) => ConvExtractor::load(p),
            None => ConvExtractor::random(self.embedding_dim, DEFAULT_SEED),
        }
    }
}

/// Three strided 3×3 conv layers with ReLU and global average pooling.
///
/// Weights are either seeded-random or read from a safetensors file holding
/// `fx.layer{0,1,2}.{weight,bias}` with the shapes of this architecture.
#[derive(Debug)]
pub struct ConvExtractor {
    identifier: String,
    dim: usize,
    layers: Vec<Conv2d>,
    registry: Registry,
}

impl ConvExtractor {
    fn build(dim: usize, seed: u64) -> Result<(Vec<Conv2d>, Registry)> {
        if dim < 2 {
            return Err(Error::config(format!("embedding_dim must be >= 2, got {dim}")));
        }
        let mut b = Builder::new("fx", seed, DType::F32, &Device::Cpu);
        let chans = [3, WIDTHS[0], WIDTHS[1], dim];
        let layers = (0..3)
            .map(|i| b.conv(&format!("layer{i}"), ConvSpec::new(chans[i], chans[i + 1], 3).stride(2, 1)))
            .collect::<Result<Vec<_>>>()?;
        Ok((layers, b.finish()))
    }

    pub fn random(dim: usize, seed: u64) -> Result<Self> {
        let (layers, registry) = Self::build(dim, seed)?;
        Ok(Self {
            identifier: format!("random-conv-{seed}"),
            dim,
            layers,
            registry,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let dim = st
            .tensor("fx.layer2.bias")
            .map_err(|_| Error::MissingKeys {
                path: path.to_path_buf(),
                missing: vec!["fx.layer2.bias".into()],
            })?
            .shape()[0];
        let (layers, registry) = Self::build(dim, 0)?;
        let mut missing = Vec::new();
        for (name, var) in registry.params() {
            match st.tensor(name) {
                Ok(view) => {
                    let t = view.load(&Device::Cpu)?.to_dtype(DType::F32)?;
                    if t.dims() != var.dims() {
                        return Err(Error::format(
                            path,
                            format!("{name} has shape {:?}, expected {:?}", t.dims(), var.dims()),
                        ));
                    }
                    var.set(&t)?;
                }
                Err(_) => missing.push(name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingKeys {
                path: path.to_path_buf(),
                missing,
            });
        }
        Ok(Self {
            identifier: format!("conv:{}", path.display()),
            dim,
            layers,
            registry,
        })
    }

    /// Writes the weights in the layout [`ConvExtractor::load`] reads.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self
            .registry
            .params()
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        safetensors::serialize_to_file(tensors, None, path)
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

impl FeatureExtractor for ConvExtractor {
    fn identifier(&self) -> &str {
        &self.identifier
    }

    fn embedding_dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &PlanarImage) -> Result<Vec<f64>> {
        let data: Vec<f32> = image.data.iter().map(|&v| v as f32).collect();
        let mut xs = Tensor::from_vec(data, (1, 3, image.height, image.width), &Device::Cpu)?;
        for (i, layer) in self.layers.iter().enumerate() {
            xs = layer.forward(&xs, Mode::Frozen)?;
            if i + 1 < self.layers.len() {
                xs = xs.relu()?;
            }
        }
        let pooled = xs.mean((2, 3))?.squeeze(0)?.to_dtype(DType::F64)?;
        Ok(pooled.to_vec1::<f64>()?)
    }
}
