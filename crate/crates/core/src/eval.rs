//! Benchmark protocol: border-cropped full-RGB PSNR/SSIM on 8-bit
//! quantised outputs, and x8 dihedral self-ensemble.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{resize_bicubic, DatasetManifest, Dihedral, ImagePair};
use crate::error::{bail, Result};
use crate::image::ImageTensor;
use crate::model::Network;

/// PSNR reported for a zero-error image.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Border width excluded from metrics at a given scale.
pub fn crop_pixels_for_scale(scale: usize) -> usize {
    2 * scale
}

/// Central `(H - 2p) x (W - 2p)` region.
pub fn crop_border(img: &ImageTensor, pixels: usize) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    if 2 * pixels >= h.min(w) {
        bail!(
            Argument,
            "cannot crop {pixels} border pixels from a {h}x{w} image"
        );
    }
    if pixels == 0 {
        return Ok(img.clone());
    }
    img.crop(pixels, pixels, h - 2 * pixels, w - 2 * pixels)
}

fn prepare(sr: &ImageTensor, hr: &ImageTensor, crop: usize) -> Result<(ImageTensor, ImageTensor)> {
    if sr.shape() != hr.shape() {
        bail!(
            Shape,
            "metric inputs differ in shape: {:?} vs {:?}",
            sr.shape(),
            hr.shape()
        );
    }
    Ok((
        crop_border(&sr.quantize_u8(), crop)?,
        crop_border(&hr.quantize_u8(), crop)?,
    ))
}

/// `10 log10(255^2 / MSE)` over every channel of the cropped, quantised images.
pub fn psnr(sr: &ImageTensor, hr: &ImageTensor, crop: usize) -> Result<f64> {
    let (a, b) = prepare(sr, hr, crop)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (*x as f64) - (*y as f64);
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    })
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| plane[y * w + x + i] * k[i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| rows[(y + i) * ow + x] * k[i]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * 255.0).powi(2);
    let c2 = (SSIM_K2 * 255.0).powi(2);
    let mu_a = filter_valid(a, h, w, k);
    let mu_b = filter_valid(b, h, w, k);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let e_aa = filter_valid(&aa, h, w, k);
    let e_bb = filter_valid(&bb, h, w, k);
    let e_ab = filter_valid(&ab, h, w, k);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Single-scale SSIM (11x11 Gaussian, sigma 1.5, dynamic range 255),
/// computed per channel on the cropped, quantised images and averaged.
pub fn ssim(sr: &ImageTensor, hr: &ImageTensor, crop: usize) -> Result<f64> {
    let (a, b) = prepare(sr, hr, crop)?;
    let [bn, cn, h, w] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        bail!(
            Argument,
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels after cropping, got {h}x{w}"
        );
    }
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for bi in 0..bn {
        for ci in 0..cn {
            let pa: Vec<f64> = a.plane(bi, ci).iter().map(|&v| v as f64).collect();
            let pb: Vec<f64> = b.plane(bi, ci).iter().map(|&v| v as f64).collect();
            total += ssim_plane(&pa, &pb, h, w, &k);
        }
    }
    Ok(total / (bn * cn) as f64)
}

/// Anything that maps a unit-range LR image to its SR estimate.
pub trait Upscaler {
    fn scale(&self) -> usize;
    fn upscale(&self, lr: &ImageTensor) -> Result<ImageTensor>;
}

impl Upscaler for Network {
    fn scale(&self) -> usize {
        self.config().scale
    }

    fn upscale(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        Network::upscale(self, lr)
    }
}

/// Plain bicubic interpolation. Equivariant under the dihedral group.
#[derive(Debug, Clone, Copy)]
pub struct BicubicUpscaler {
    pub scale: usize,
}

impl Upscaler for BicubicUpscaler {
    fn scale(&self) -> usize {
        self.scale
    }

    fn upscale(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        resize_bicubic(lr, lr.height() * self.scale, lr.width() * self.scale, true)
    }
}

/// Mean of the SR outputs over the eight dihedral transforms of the input,
/// each mapped back by the inverse transform.
pub fn self_ensemble(model: &dyn Upscaler, lr: &ImageTensor) -> Result<ImageTensor> {
    let mut acc: Option<Vec<f64>> = None;
    let mut shape = [0; 4];
    let mut range = lr.range();
    for d in Dihedral::all() {
        let out = d.invert(&model.upscale(&d.apply(lr))?);
        match acc.as_mut() {
            None => {
                shape = out.shape();
                range = out.range();
                acc = Some(out.data().iter().map(|&v| v as f64).collect());
            }
            Some(acc) => {
                if out.shape() != shape {
                    bail!(
                        Shape,
                        "ensemble branch {d:?} produced {:?}, expected {shape:?}",
                        out.shape()
                    );
                }
                acc.iter_mut().zip(out.data()).for_each(|(a, &v)| *a += v as f64);
            }
        }
    }
    let data = acc
        .expect("eight branches")
        .into_iter()
        .map(|v| (v / 8.0) as f32)
        .collect();
    ImageTensor::new(data, shape, range)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    RgbFull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub scale: usize,
    pub tta: bool,
    pub crop_pixels: usize,
    pub channel_mode: ChannelMode,
    pub per_image: Vec<ImageMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub skipped: Vec<SkippedImage>,
}

impl MetricReport {
    fn assemble(
        dataset: String,
        scale: usize,
        tta: bool,
        mut per_image: Vec<ImageMetrics>,
        skipped: Vec<SkippedImage>,
    ) -> Self {
        per_image.sort_by(|a, b| a.name.cmp(&b.name));
        let n = per_image.len().max(1) as f64;
        let mean_psnr = per_image.iter().map(|m| m.psnr).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|m| m.ssim).sum::<f64>() / n;
        Self {
            dataset,
            scale,
            tta,
            crop_pixels: crop_pixels_for_scale(scale),
            channel_mode: ChannelMode::RgbFull,
            per_image,
            mean_psnr,
            mean_ssim,
            skipped,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.skipped.is_empty()
    }

    /// Human-readable table: one summary row in the usual
    /// method / scale / dataset / PSNR / SSIM layout, then per-image rows.
    pub fn to_table(&self, method: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:<16} {:>9} {:>8}",
            "Method", "Scale", "Dataset", "PSNR", "SSIM"
        );
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:<16} {:>9.4} {:>8.4}",
            if self.tta { format!("{method}+") } else { method.to_string() },
            format!("x{}", self.scale),
            self.dataset,
            self.mean_psnr,
            self.mean_ssim
        );
        let _ = writeln!(s);
        for m in &self.per_image {
            let _ = writeln!(s, "  {:<38} {:>9.4} {:>8.4}", m.name, m.psnr, m.ssim);
        }
        for sk in &self.skipped {
            let _ = writeln!(s, "  {:<38} skipped: {}", sk.name, sk.reason);
        }
        s
    }
}

fn score(model: &dyn Upscaler, pair: &ImagePair, tta: bool) -> Result<ImageMetrics> {
    let sr = if tta {
        self_ensemble(model, &pair.lr)?
    } else {
        model.upscale(&pair.lr)?
    };
    let crop = crop_pixels_for_scale(pair.scale);
    Ok(ImageMetrics {
        name: pair.name.clone(),
        psnr: psnr(&sr, &pair.hr, crop)?,
        ssim: ssim(&sr, &pair.hr, crop)?,
    })
}

/// Scores in-memory pairs.
pub fn evaluate_pairs(
    model: &dyn Upscaler,
    dataset: &str,
    pairs: &[ImagePair],
    tta: bool,
) -> Result<MetricReport> {
    let per_image = pairs
        .iter()
        .map(|p| score(model, p, tta))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::assemble(
        dataset.to_string(),
        model.scale(),
        tta,
        per_image,
        Vec::new(),
    ))
}

/// Scores every manifest entry. Entries that cannot be loaded are listed
/// in `skipped` instead of aborting the run.
pub fn run_benchmark(
    model: &dyn Upscaler,
    manifest: &DatasetManifest,
    scale: usize,
    tta: bool,
) -> Result<MetricReport> {
    if manifest.scale != scale || model.scale() != scale {
        bail!(
            Argument,
            "scale mismatch: manifest x{}, model x{}, requested x{scale}",
            manifest.scale,
            model.scale()
        );
    }
    let mut per_image = Vec::new();
    let mut skipped = Vec::new();
    for entry in &manifest.entries {
        match ImagePair::load(entry) {
            Ok(pair) => per_image.push(score(model, &pair, tta)?),
            Err(e) => {
                log::warn!("skipping {}: {e}", entry.name);
                skipped.push(SkippedImage {
                    name: entry.name.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    let dataset = manifest
        .root
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string();
    Ok(MetricReport::assemble(dataset, scale, tta, per_image, skipped))
}
