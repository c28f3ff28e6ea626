//! Procedural texture images for smoke runs and tests.

use std::f64::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::save_png;

/// A seeded texture: two oriented sinusoid gratings over a colour gradient.
pub fn texture_image(size: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut waves = Vec::with_capacity(2);
    for _ in 0..2 {
        let angle: f64 = rng.random_range(0.0..PI);
        let period: f64 = rng.random_range(6.0..20.0);
        let phase: f64 = rng.random_range(0.0..2.0 * PI);
        let colour: [f64; 3] = [
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
        ];
        waves.push((angle.cos(), angle.sin(), 2.0 * PI / period, phase, colour));
    }
    let base: [f64; 3] = [
        rng.random_range(0.25..0.75),
        rng.random_range(0.25..0.75),
        rng.random_range(0.25..0.75),
    ];
    let tilt: [f64; 3] = [
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
    ];
    let n = size.max(1) as f64;
    RgbImage::from_fn(size, size, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        let mut px = [0u8; 3];
        for (c, out) in px.iter_mut().enumerate() {
            let mut v = base[c] + tilt[c] * (fx + fy) / (2.0 * n);
            for (cx, cy, k, phase, colour) in &waves {
                v += colour[c] * (k * (cx * fx + cy * fy) + phase).sin();
            }
            *out = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Rgb(px)
    })
}

/// Writes `count` textures as `tex_0000.png`, ... into `dir`.
pub fn write_texture_dataset(dir: impl AsRef<Path>, count: usize, size: u32, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in 0..count {
        let img = texture_image(size, seed.wrapping_add(i as u64));
        save_png(&img, dir.join(format!("tex_{i:04}.png")))?;
    }
    Ok(())
}
