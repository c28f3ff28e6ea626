//! Binary validity masks and the corrupt/compose image algebra.
//!
//! A mask stores one value per pixel: `1` marks a valid (known) pixel and `0`
//! a hole. Masks are single-channel and broadcast over the RGB channels of the
//! image they are applied to.

use std::io::Cursor;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, ImageFormat, ImageReader, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// PNG gray level at or above which a pixel is read as valid.
pub const VALID_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl Mask {
    /// The all-valid mask (no holes).
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    /// Builds a mask from row-major values, each of which must be 0 or 1.
    pub fn from_values(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::domain(format!(
                "mask of {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::domain(format!("mask value {v} is not binary")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, valid: bool) {
        self.values[y * self.width + x] = valid as u8;
    }

    pub fn hole_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 0).count()
    }

    /// Fraction of missing pixels.
    pub fn ratio(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.hole_count() as f64 / self.values.len() as f64
    }

    pub fn inverted(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| 1 - v).collect(),
        }
    }

    /// Reads an 8-bit grayscale PNG; gray levels `>= 128` become valid pixels.
    /// With `invert` the polarity is flipped after thresholding, for datasets
    /// that paint holes white.
    pub fn load(path: impl AsRef<Path>, invert: bool) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mask = Self::decode_png(&bytes).map_err(|reason| Error::format(path, reason))?;
        Ok(if invert { mask.inverted() } else { mask })
    }

    /// Decodes PNG bytes with the same rules as [`Mask::load`].
    pub fn decode_png(bytes: &[u8]) -> std::result::Result<Self, String> {
        let reader = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
        let img = reader.decode().map_err(|e| e.to_string())?;
        let img = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(format!(
                    "expected an 8-bit grayscale PNG, found {:?}",
                    other.color()
                ))
            }
        };
        let (w, h) = img.dimensions();
        let values = img
            .into_raw()
            .into_iter()
            .map(|p| (p >= VALID_THRESHOLD) as u8)
            .collect();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            values,
        })
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.is_valid(y as usize, x as usize) {
                255
            } else {
                0
            }])
        })
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = Cursor::new(Vec::new());
        self.to_gray_image()
            .write_to(&mut out, ImageFormat::Png)
            .expect("in-memory png encoding");
        out.into_inner()
    }

    /// Writes the mask as an 8-bit grayscale PNG, 255 = valid, 0 = hole.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode_png()).map_err(|e| Error::io(path, e))
    }

    /// `[1, H, W]` u8 tensor of 0/1 values.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.values.clone(),
            (1, self.height, self.width),
            device,
        )?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = t.to_dtype(DType::U8)?;
        let (h, w) = match t.dims() {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            d => return Err(Error::domain(format!("cannot read a mask from shape {d:?}"))),
        };
        Self::from_values(h, w, t.flatten_all()?.to_vec1::<u8>()?)
    }
}

/// Stacks masks of equal size into a `[B, 1, H, W]` u8 tensor.
pub fn stack_masks(masks: &[Mask], device: &Device) -> Result<Tensor> {
    let first = masks
        .first()
        .ok_or_else(|| Error::domain("cannot stack an empty mask list"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if (m.height, m.width) != (h, w) {
            return Err(Error::domain(format!(
                "mask sizes differ: {h}x{w} vs {}x{}",
                m.height, m.width
            )));
        }
        data.extend_from_slice(&m.values);
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), device)?)
}

pub fn mask_ratio(m: &Mask) -> f64 {
    m.ratio()
}

/// Mask-ratio buckets used for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RatioBucket {
    #[serde(rename = "B0_20")]
    B0To20,
    #[serde(rename = "B20_40")]
    B20To40,
    #[serde(rename = "B40_60")]
    B40To60,
    #[serde(rename = "OUT_OF_RANGE")]
    OutOfRange,
}

impl RatioBucket {
    /// The buckets that appear in a metrics report.
    pub const REPORTED: [RatioBucket; 3] = [Self::B0To20, Self::B20To40, Self::B40To60];

    /// `[0, 0.2)`, `[0.2, 0.4)`, `[0.4, 0.6]`, anything above 0.6 is out of range.
    pub fn classify(ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::domain(format!("mask ratio {ratio} outside [0, 1]")));
        }
        Ok(if ratio < 0.2 {
            Self::B0To20
        } else if ratio < 0.4 {
            Self::B20To40
        } else if ratio <= 0.6 {
            Self::B40To60
        } else {
            Self::OutOfRange
        })
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::B0To20 => "B0_20",
            Self::B20To40 => "B20_40",
            Self::B40To60 => "B40_60",
            Self::OutOfRange => "OUT_OF_RANGE",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::B0To20 => "0%-20%",
            Self::B20To40 => "20%-40%",
            Self::B40To60 => "40%-60%",
            Self::OutOfRange => ">60%",
        }
    }
}

pub fn bucket(ratio: f64) -> Result<RatioBucket> {
    RatioBucket::classify(ratio)
}

/// Checks that `mask` (`[.., 1, H, W]`) fits `image` (`[.., 3, H, W]`) and
/// returns it as a u8 predicate broadcast over the image channels.
fn broadcast_mask(image: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (idims, mdims) = (image.dims(), mask.dims());
    let rank = idims.len();
    let ok = rank >= 3
        && mdims.len() == rank
        && idims[rank - 3] == 3
        && mdims[rank - 3] == 1
        && idims[..rank - 3] == mdims[..rank - 3]
        && idims[rank - 2..] == mdims[rank - 2..];
    if !ok {
        return Err(Error::domain(format!(
            "mask shape {mdims:?} does not fit image shape {idims:?}"
        )));
    }
    let mask = if mask.dtype() == DType::U8 {
        mask.clone()
    } else {
        mask.ne(0.0)?
    };
    Ok(mask.broadcast_as(idims)?)
}

/// `x ⊙ m`: hole pixels become exactly zero in every channel.
pub fn corrupt(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let pred = broadcast_mask(x, mask)?;
    Ok(pred.where_cond(x, &x.zeros_like()?)?)
}

/// `(1 - m) ⊙ x̂ + m ⊙ x̃` as a per-pixel select, so valid pixels are copied
/// bit-exactly from `x_tilde` and holes from `x_hat`.
pub fn compose(x_hat: &Tensor, x_tilde: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if x_hat.dims() != x_tilde.dims() {
        return Err(Error::domain(format!(
            "prediction shape {:?} differs from input shape {:?}",
            x_hat.dims(),
            x_tilde.dims()
        )));
    }
    let pred = broadcast_mask(x_tilde, mask)?;
    Ok(pred.where_cond(x_tilde, x_hat)?)
}

/// Parameters of the random free-form brush. Lengths and widths are fractions
/// of the shorter image side so one setting works across resolutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrushParams {
    pub strokes: (u32, u32),
    pub vertices: (u32, u32),
    pub width: (f64, f64),
    pub segment_length: (f64, f64),
    pub rectangles: (u32, u32),
    pub rectangle_size: (f64, f64),
    /// Strokes or rectangles that would push the hole ratio above this are discarded.
    pub max_ratio: f64,
}

impl Default for BrushParams {
    fn default() -> Self {
        Self {
            strokes: (1, 5),
            vertices: (4, 10),
            width: (0.04, 0.1),
            segment_length: (0.05, 0.2),
            rectangles: (0, 2),
            rectangle_size: (0.1, 0.3),
            max_ratio: 0.6,
        }
    }
}

impl BrushParams {
    /// No strokes and no rectangles: always yields the all-valid mask.
    pub fn empty() -> Self {
        Self {
            strokes: (0, 0),
            rectangles: (0, 0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn range<T: PartialOrd + std::fmt::Debug>(name: &str, r: &(T, T)) -> Result<()> {
            if r.0 > r.1 {
                return Err(Error::config(format!(
                    "brush {name} range has min {:?} > max {:?}",
                    r.0, r.1
                )));
            }
            Ok(())
        }
        fn fraction(name: &str, r: &(f64, f64)) -> Result<()> {
            range(name, r)?;
            if !(r.0 > 0.0 && r.1 <= 1.0) {
                return Err(Error::config(format!(
                    "brush {name} range {r:?} must lie in (0, 1]"
                )));
            }
            Ok(())
        }
        range("strokes", &self.strokes)?;
        range("vertices", &self.vertices)?;
        range("rectangles", &self.rectangles)?;
        if self.vertices.0 == 0 {
            return Err(Error::config("brush strokes need at least one vertex"));
        }
        fraction("width", &self.width)?;
        fraction("segment_length", &self.segment_length)?;
        fraction("rectangle_size", &self.rectangle_size)?;
        if !(self.max_ratio > 0.0 && self.max_ratio <= 1.0) {
            return Err(Error::config(format!(
                "brush max_ratio {} must lie in (0, 1]",
                self.max_ratio
            )));
        }
        Ok(())
    }
}

/// Random free-form mask made of thick polyline strokes and rectangles,
/// deterministic for a given `(height, width, seed, brush)`.
pub fn generate_freeform_mask(
    height: usize,
    width: usize,
    seed: u64,
    brush: &BrushParams,
) -> Result<Mask> {
    if height == 0 || width == 0 {
        return Err(Error::config(format!(
            "mask size must be positive, got {height}x{width}"
        )));
    }
    brush.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = height.min(width) as f64;
    let max_holes = (brush.max_ratio * (height * width) as f64).floor() as usize;

    let mut canvas = Canvas::new(height, width);
    let strokes = rng.random_range(brush.strokes.0..=brush.strokes.1);
    for _ in 0..strokes {
        let mut trial = canvas.clone();
        let radius = 0.5 * side * rng.random_range(brush.width.0..=brush.width.1);
        let mut start = (
            rng.random_range(0.0..width as f64),
            rng.random_range(0.0..height as f64),
        );
        let vertices = rng.random_range(brush.vertices.0..=brush.vertices.1);
        for _ in 0..vertices {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let len = side * rng.random_range(brush.segment_length.0..=brush.segment_length.1);
            let end = (
                (start.0 + len * angle.cos()).clamp(0.0, width as f64 - 1.0),
                (start.1 + len * angle.sin()).clamp(0.0, height as f64 - 1.0),
            );
            trial.capsule(start, end, radius);
            start = end;
        }
        if trial.holes <= max_holes {
            canvas = trial;
        }
    }

    let rects = rng.random_range(brush.rectangles.0..=brush.rectangles.1);
    for _ in 0..rects {
        let mut trial = canvas.clone();
        let rw = (side * rng.random_range(brush.rectangle_size.0..=brush.rectangle_size.1))
            .round()
            .max(1.0) as usize;
        let rh = (side * rng.random_range(brush.rectangle_size.0..=brush.rectangle_size.1))
            .round()
            .max(1.0) as usize;
        let x0 = rng.random_range(0..=width.saturating_sub(rw));
        let y0 = rng.random_range(0..=height.saturating_sub(rh));
        trial.rect(x0, y0, rw, rh);
        if trial.holes <= max_holes {
            canvas = trial;
        }
    }

    Ok(canvas.into_mask())
}

#[derive(Clone)]
struct Canvas {
    mask: Mask,
    holes: usize,
}

impl Canvas {
    fn new(height: usize, width: usize) -> Self {
        Self {
            mask: Mask::ones(height, width),
            holes: 0,
        }
    }

    fn punch(&mut self, y: usize, x: usize) {
        let idx = y * self.mask.width + x;
        if self.mask.values[idx] == 1 {
            self.mask.values[idx] = 0;
            self.holes += 1;
        }
    }

    /// Marks every pixel whose center lies within `radius` of segment `a`-`b`.
    fn capsule(&mut self, a: (f64, f64), b: (f64, f64), radius: f64) {
        let (h, w) = (self.mask.height, self.mask.width);
        let x_lo = (a.0.min(b.0) - radius).floor().max(0.0) as usize;
        let x_hi = ((a.0.max(b.0) + radius).ceil() as usize).min(w - 1);
        let y_lo = (a.1.min(b.1) - radius).floor().max(0.0) as usize;
        let y_hi = ((a.1.max(b.1) + radius).ceil() as usize).min(h - 1);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        let r2 = radius * radius;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = if len2 > 0.0 {
                    (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
                if qx * qx + qy * qy <= r2 {
                    self.punch(y, x);
                }
            }
        }
    }

    fn rect(&mut self, x0: usize, y0: usize, rw: usize, rh: usize) {
        let (h, w) = (self.mask.height, self.mask.width);
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                self.punch(y, x);
            }
        }
    }

    fn into_mask(self) -> Mask {
        self.mask
    }
}
