//! Image-quality metrics and the mask-ratio bucketed evaluation report.
//!
//! All metrics work on [`PlanarImage`]s in `[0, 1]`. PSNR and SSIM use all
//! three RGB channels (SSIM is averaged over channels).

mod extractor;
mod fid;
mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Serialize, Serializer};

pub use extractor::{ConvExtractor, ExtractorHandle, FeatureExtractor};
pub use fid::{fid, sqrtm_psd, GaussianStats, EIGEN_WARN_THRESHOLD};
pub use metrics::{
    gaussian_taps, mean_l1, psnr, ssim, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW,
};

use crate::error::{Error, Result};
use crate::imageio::{list_images, load_rgb, PlanarImage};
use crate::mask::{Mask, RatioBucket};

/// Embeds every image and fits a Gaussian.
pub fn extract_statistics(
    images: &[&PlanarImage],
    extractor: &dyn FeatureExtractor,
) -> Result<GaussianStats> {
    if images.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: images.len(),
        });
    }
    let rows = images
        .par_iter()
        .map(|img| extractor.embed(img))
        .collect::<Result<Vec<_>>>()?;
    GaussianStats::from_embeddings(&rows)
}

fn finite_or_inf<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() && *x > 0.0 => s.serialize_str("inf"),
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

/// Aggregates for one mask-ratio bucket. Averages are `None` for an empty
/// bucket; `fid` needs at least two images.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BucketMetrics {
    pub mean_l1: Option<f64>,
    #[serde(serialize_with = "finite_or_inf")]
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub fid: Option<f64>,
    pub n_images: usize,
}

/// A file pair that could not be evaluated, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedFile {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Always holds exactly the reported buckets.
    pub buckets: BTreeMap<RatioBucket, BucketMetrics>,
    pub skipped: Vec<SkippedFile>,
}

impl MetricsReport {
    /// `{"B0_20": {...}, "B20_40": {...}, "B40_60": {...}}`.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, &BucketMetrics> =
            self.buckets.iter().map(|(b, m)| (b.key(), m)).collect();
        serde_json::to_string_pretty(&map).expect("report serializes")
    }

    /// Metrics as rows, mask ratios as columns.
    pub fn to_table(&self) -> String {
        let cols: Vec<&BucketMetrics> = RatioBucket::REPORTED.iter().map(|b| &self.buckets[b]).collect();
        let mut out = format!("{:<10}", "Metric");
        for b in RatioBucket::REPORTED {
            let _ = write!(out, "{:>12}", b.label());
        }
        out.push('\n');
        let rows: [(&str, fn(&BucketMetrics) -> Option<f64>, usize); 4] = [
            ("mean l1", |m| m.mean_l1, 4),
            ("PSNR", |m| m.psnr, 2),
            ("SSIM", |m| m.ssim, 4),
            ("FID", |m| m.fid, 2),
        ];
        for (label, get, prec) in rows {
            let _ = write!(out, "{label:<10}");
            for m in &cols {
                let cell = match get(m) {
                    Some(v) if v.is_infinite() => "inf".to_string(),
                    Some(v) => format!("{v:.prec$}"),
                    None => "-".to_string(),
                };
                let _ = write!(out, "{cell:>12}");
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<10}", "images");
        for m in &cols {
            let _ = write!(out, "{:>12}", m.n_images);
        }
        out.push('\n');
        out
    }
}

/// Side-by-side table of several runs, one row per (run, bucket).
pub fn ablation_table(runs: &[(String, MetricsReport)]) -> String {
    let mut out = format!(
        "{:<12}{:>10}{:>10}{:>10}{:>10}{:>10}{:>8}\n",
        "run", "ratio", "mean l1", "PSNR", "SSIM", "FID", "images"
    );
    let fmt = |v: Option<f64>, prec: usize| match v {
        Some(x) if x.is_infinite() => "inf".to_string(),
        Some(x) => format!("{x:.prec$}"),
        None => "-".to_string(),
    };
    for (name, report) in runs {
        for b in RatioBucket::REPORTED {
            let m = &report.buckets[&b];
            let _ = writeln!(
                out,
                "{name:<12}{:>10}{:>10}{:>10}{:>10}{:>10}{:>8}",
                b.label(),
                fmt(m.mean_l1, 4),
                fmt(m.psnr, 2),
                fmt(m.ssim, 4),
                fmt(m.fid, 2),
                m.n_images
            );
        }
    }
    out
}

/// One aligned evaluation triple.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub name: String,
    pub result: PlanarImage,
    pub truth: PlanarImage,
    pub mask: Mask,
}

struct Scored<'a> {
    item: &'a EvalItem,
    bucket: RatioBucket,
    l1: f64,
    psnr: f64,
    ssim: f64,
}

/// Scores each item, buckets it by its mask ratio and fits FID statistics per
/// bucket. Items whose mask is over 60% holes or whose sizes disagree are
/// reported in `skipped`.
pub fn evaluate_items(
    items: &[EvalItem],
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<MetricsReport> {
    let scored: Vec<std::result::Result<Scored, SkippedFile>> = items
        .par_iter()
        .map(|item| {
            let skip = |reason: String| SkippedFile {
                name: item.name.clone(),
                reason,
            };
            if !item.result.same_shape(&item.truth)
                || (item.mask.height(), item.mask.width()) != (item.truth.height, item.truth.width)
            {
                return Err(skip(format!(
                    "size mismatch: result {}x{}, truth {}x{}, mask {}x{}",
                    item.result.height,
                    item.result.width,
                    item.truth.height,
                    item.truth.width,
                    item.mask.height(),
                    item.mask.width()
                )));
            }
            let bucket = RatioBucket::classify(item.mask.ratio()).map_err(|e| skip(e.to_string()))?;
            if bucket == RatioBucket::OutOfRange {
                return Err(skip(format!(
                    "mask ratio {:.3} is above the reported range",
                    item.mask.ratio()
                )));
            }
            let metric = |r: Result<f64>| r.map_err(|e| skip(e.to_string()));
            Ok(Scored {
                item,
                bucket,
                l1: metric(mean_l1(&item.result, &item.truth))?,
                psnr: metric(psnr(&item.result, &item.truth))?,
                ssim: metric(ssim(&item.result, &item.truth))?,
            })
        })
        .collect();

    let mut skipped = Vec::new();
    let mut by_bucket: BTreeMap<RatioBucket, Vec<Scored>> = BTreeMap::new();
    for s in scored {
        match s {
            Ok(s) => by_bucket.entry(s.bucket).or_default().push(s),
            Err(skip) => skipped.push(skip),
        }
    }
    let mut buckets = BTreeMap::new();
    for b in RatioBucket::REPORTED {
        let members = by_bucket.remove(&b).unwrap_or_default();
        let n = members.len();
        let mut m = BucketMetrics {
            n_images: n,
            ..Default::default()
        };
        if n > 0 {
            let mean = |f: fn(&Scored) -> f64| members.iter().map(f).sum::<f64>() / n as f64;
            m.mean_l1 = Some(mean(|s| s.l1));
            m.psnr = Some(mean(|s| s.psnr));
            m.ssim = Some(mean(|s| s.ssim));
        }
        if let (Some(fx), true) = (extractor, n >= 2) {
            let results: Vec<&PlanarImage> = members.iter().map(|s| &s.item.result).collect();
            let truths: Vec<&PlanarImage> = members.iter().map(|s| &s.item.truth).collect();
            m.fid = Some(fid(
                &extract_statistics(&results, fx)?,
                &extract_statistics(&truths, fx)?,
            )?);
        }
        buckets.insert(b, m);
    }
    Ok(MetricsReport { buckets, skipped })
}

fn names_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    Ok(list_images(dir)?
        .into_iter()
        .filter_map(|p| {
            let stem = p.file_stem()?.to_str()?.to_string();
            Some((stem, p))
        })
        .collect())
}

/// Evaluates `results/NAME`, `truth/NAME`, `masks/NAME` triples matched by
/// file stem. Files without all three counterparts are listed as skipped.
pub fn evaluate(
    results_dir: impl AsRef<Path>,
    truth_dir: impl AsRef<Path>,
    masks_dir: impl AsRef<Path>,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<MetricsReport> {
    let results = names_by_stem(results_dir.as_ref())?;
    let truths = names_by_stem(truth_dir.as_ref())?;
    let masks = names_by_stem(masks_dir.as_ref())?;
    let mut all: Vec<&String> = results.keys().chain(truths.keys()).chain(masks.keys()).collect();
    all.sort();
    all.dedup();
    let mut skipped = Vec::new();
    let mut items = Vec::new();
    for name in all {
        let (Some(r), Some(t), Some(m)) = (results.get(name), truths.get(name), masks.get(name))
        else {
            let mut absent = Vec::new();
            for (dir, set) in [("results", &results), ("truth", &truths), ("masks", &masks)] {
                if !set.contains_key(name) {
                    absent.push(dir);
                }
            }
            skipped.push(SkippedFile {
                name: name.clone(),
                reason: format!("missing in {}", absent.join(", ")),
            });
            continue;
        };
        let loaded = (|| -> Result<EvalItem> {
            Ok(EvalItem {
                name: name.clone(),
                result: PlanarImage::from_rgb8(&load_rgb(r)?),
                truth: PlanarImage::from_rgb8(&load_rgb(t)?),
                mask: Mask::load(m, false)?,
            })
        })();
        match loaded {
            Ok(item) => items.push(item),
            Err(e) => skipped.push(SkippedFile {
                name: name.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let mut report = evaluate_items(&items, extractor)?;
    skipped.extend(report.skipped);
    skipped.sort_by(|a, b| a.name.cmp(&b.name));
    report.skipped = skipped;
    Ok(report)
}
