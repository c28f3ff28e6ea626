#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use image::{GrayImage, Luma, RgbImage};
use scat_core::mask::Mask;
use scat_core::trainer::{fit, TrainConfig};

pub const SIZE: u32 = 32;

pub fn tiny_config(data: &Path, out: &Path, max_steps: u64) -> TrainConfig {
    TrainConfig::from_json(&format!(
        r#"{{"dataset_dir": {data:?}, "max_steps": {max_steps}, "image_size": {SIZE},
            "batch_size": 2, "checkpoint_every": 0, "log_every": 1, "output_dir": {out:?},
            "model": {{"generator_channels": 8, "generator_blocks": 1, "dilation_rates": [1, 2],
                       "discriminator_channels": 8, "discriminator_final_channels": 1,
                       "segmentation_channels": 4}}}}"#
    ))
    .unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    checkpoint: PathBuf,
    data: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        scat_core::synthetic::write_texture_dataset(&data, 4, SIZE, 7).unwrap();
        let out = dir.path().join("run");
        fit(&tiny_config(&data, &out, 1)).unwrap();
        let checkpoint = scat_core::trainer::latest_checkpoint_path(&out);
        assert!(checkpoint.is_file());
        Fixture {
            _dir: dir,
            checkpoint,
            data,
        }
    })
}

/// A one-step checkpoint of a tiny model, shared by every test in the binary.
pub fn checkpoint() -> &'static Path {
    &fixture().checkpoint
}

pub fn dataset_dir() -> &'static Path {
    &fixture().data
}

pub fn texture(size: u32, seed: u64) -> RgbImage {
    scat_core::synthetic::texture_image(size, seed)
}

/// Holes in a centred square covering roughly `fraction` of the image.
pub fn square_hole_mask(w: u32, h: u32, fraction: f64) -> Mask {
    let side_w = ((w as f64) * fraction.sqrt()).round() as u32;
    let side_h = ((h as f64) * fraction.sqrt()).round() as u32;
    let (x0, y0) = ((w - side_w) / 2, (h - side_h) / 2);
    let img = GrayImage::from_fn(w, h, |x, y| {
        let hole = (x0..x0 + side_w).contains(&x) && (y0..y0 + side_h).contains(&y);
        Luma([if hole { 0 } else { 255 }])
    });
    Mask::decode_png(&png_gray(&img)).unwrap()
}

pub fn png_gray(img: &GrayImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
    buf.into_inner()
}
