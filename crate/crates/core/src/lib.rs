//! Inpainting with segmentation-confusion adversarial training and
//! discriminator-space contrastive losses.
//!
//! The crate is organised around the training pipeline:
//!
//! * [`mask`]: free-form masks and the corrupt/compose algebra,
//! * [`nn`]: generator, discriminator (with feature taps) and U-net segmenter,
//! * [`losses`]: every training objective and their weighted totals,
//! * [`trainer`]: alternating optimisation, checkpoints and ablations,
//! * [`eval`]: mean l1, PSNR, SSIM and FID with mask-ratio bucketing.

pub mod error;
pub mod eval;
pub mod imageio;
pub mod inference;
pub mod losses;
pub mod mask;
pub mod nn;
pub mod optim;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
