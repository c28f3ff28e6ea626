use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use scat_core::eval::{evaluate, ExtractorHandle, FeatureExtractor};
use scat_core::imageio::{list_images, load_rgb, save_png};
use scat_core::inference::{InpaintOptions, Inpainter};
use scat_core::mask::{generate_freeform_mask, BrushParams, Mask, RatioBucket};
use scat_core::trainer::{fit_with, FitOptions, TrainConfig};

use crate::{exit, EvalArgs, Failure, InferArgs, MakeMasksArgs, TrainArgs};

fn require_file(path: &Path) -> Result<(), Failure> {
    if !path.is_file() {
        return Err(Failure::new(
            exit::BAD_INPUT,
            anyhow::anyhow!("file not found: {}", path.display()),
        ));
    }
    Ok(())
}

fn require_dir(path: &Path) -> Result<(), Failure> {
    if !path.is_dir() {
        return Err(Failure::new(
            exit::BAD_INPUT,
            anyhow::anyhow!("directory not found: {}", path.display()),
        ));
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<(), Failure> {
    require_file(&args.config)?;
    let config = TrainConfig::load(&args.config)?;
    if let Some(r) = &args.resume {
        require_file(r)?;
    }
    let options = FitOptions {
        resume: args.resume.clone(),
    };
    let log_every = config.log_every.max(1);
    let state = fit_with(&config, &options, |step, report| {
        if step % log_every == 0 {
            log::info!(
                "step {step}: total_g {:.4} total_ds {:.4} rec {:.4}",
                report.total_g,
                report.total_ds,
                report.rec
            );
        }
    })?;
    log::info!(
        "training finished at step {} in {}",
        state.step(),
        config.output_dir.display()
    );
    Ok(())
}

/// Image stems present in all three directories.
fn common_stems(dirs: [&Path; 3]) -> Result<BTreeSet<String>, Failure> {
    let mut sets = Vec::new();
    for d in dirs {
        let stems: BTreeSet<String> = list_images(d)?
            .iter()
            .filter_map(|p| Some(p.file_stem()?.to_str()?.to_string()))
            .collect();
        sets.push(stems);
    }
    Ok(sets[0]
        .iter()
        .filter(|s| sets[1].contains(*s) && sets[2].contains(*s))
        .cloned()
        .collect())
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

pub fn eval(args: &EvalArgs) -> Result<(), Failure> {
    for d in [&args.results, &args.truth, &args.masks] {
        require_dir(d)?;
    }
    if common_stems([&args.results, &args.truth, &args.masks])?.is_empty() {
        return Err(Failure::new(
            exit::EMPTY_INTERSECTION,
            anyhow::anyhow!("no file names are shared by the results, truth and masks directories"),
        ));
    }
    let extractor = match &args.extractor_weights {
        Some(w) => {
            require_file(w)?;
            Some(ExtractorHandle::weights(w).open()?)
        }
        None => {
            log::warn!("no --extractor-weights given; FID will be reported as null");
            None
        }
    };
    let report = evaluate(
        &args.results,
        &args.truth,
        &args.masks,
        extractor.as_ref().map(|e| e as &dyn FeatureExtractor),
    )?;
    for s in &report.skipped {
        log::warn!("skipped {}: {}", s.name, s.reason);
    }
    if let Some(parent) = args.report_out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let write = |path: &Path, text: String| -> Result<(), Failure> {
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    };
    write(&args.report_out, report.to_json())?;
    write(&with_extension(&args.report_out, "txt"), report.to_table())?;
    write(
        &with_extension(&args.report_out, "skipped.json"),
        serde_json::to_string_pretty(&report.skipped).context("serializing skipped files")?,
    )?;
    println!("{}", report.to_table());
    Ok(())
}

pub fn infer(args: &InferArgs) -> Result<(), Failure> {
    for p in [&args.image, &args.mask, &args.checkpoint] {
        require_file(p)?;
    }
    let image = load_rgb(&args.image)?;
    let mask = Mask::load(&args.mask, false)?;
    let inpainter = Inpainter::load(&args.checkpoint)?;
    let opts = InpaintOptions {
        return_raw: args.raw,
        resize: args.resize,
    };
    if let Err(e) = inpainter.check(&image, &mask, opts) {
        return Err(Failure::new(
            exit::SIZE_MISMATCH,
            anyhow::anyhow!("{e} (pass --resize to resample)"),
        ));
    }
    let out = inpainter.inpaint(&image, &mask, opts)?;
    save_png(&out, &args.out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    file: String,
    ratio: f64,
    bucket: &'static str,
}

pub fn make_masks(args: &MakeMasksArgs) -> Result<(), Failure> {
    let mut brush = BrushParams::default();
    if let Some(v) = args.strokes {
        brush.strokes = v;
    }
    if let Some(v) = args.vertices {
        brush.vertices = v;
    }
    if let Some(v) = args.width {
        brush.width = v;
    }
    if let Some(v) = args.segment_length {
        brush.segment_length = v;
    }
    if let Some(v) = args.rectangles {
        brush.rectangles = v;
    }
    if let Some(v) = args.rectangle_size {
        brush.rectangle_size = v;
    }
    if let Some(v) = args.max_ratio {
        brush.max_ratio = v;
    }
    brush.validate()?;
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let mut manifest = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let seed = scat_core::trainer::derive_seed(args.seed, 0x4d41534b, i as u64);
        let mask = generate_freeform_mask(args.size, args.size, seed, &brush)?;
        let file = format!("mask_{i:05}.png");
        mask.save(args.out_dir.join(&file))?;
        let ratio = mask.ratio();
        manifest.push(ManifestEntry {
            file,
            ratio,
            bucket: RatioBucket::classify(ratio)?.key(),
        });
    }
    let path = args.out_dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).context("serializing manifest")?)
        .with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {} masks to {}", args.count, args.out_dir.display());
    Ok(())
}
