//! Dataset ingestion, bicubic degradation, patch sampling and augmentation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};
use crate::image::{ImageTensor, ValueRange};

/// Keys cubic convolution kernel. `a = -0.5` reproduces MATLAB's `imresize`.
pub fn bicubic_weight(x: f64, a: f64) -> f64 {
    let ax = x.abs();
    if ax <= 1.0 {
        (a + 2.0) * ax.powi(3) - (a + 3.0) * ax.powi(2) + 1.0
    } else if ax < 2.0 {
        a * ax.powi(3) - 5.0 * a * ax.powi(2) + 8.0 * a * ax - 4.0 * a
    } else {
        0.0
    }
}

pub const BICUBIC_A: f64 = -0.5;

/// Source taps and normalised weights of one output sample along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisTaps {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// MATLAB-convention resampling taps for an axis of length `in_len`
/// resized to `out_len`. With `antialias` and a shrinking ratio the
/// kernel is stretched by `1/ratio`. Out-of-range taps are clamped.
pub fn axis_taps(in_len: usize, out_len: usize, antialias: bool) -> Vec<AxisTaps> {
    let scale = out_len as f64 / in_len as f64;
    let (kscale, width) = if antialias && scale < 1.0 {
        (scale, 4.0 / scale)
    } else {
        (1.0, 4.0)
    };
    let taps = width.ceil() as isize + 2;
    (1..=out_len)
        .map(|i| {
            // 1-based centre of output sample i in input coordinates
            let u = i as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - width / 2.0).floor() as isize;
            let mut indices = Vec::with_capacity(taps as usize);
            let mut weights = Vec::with_capacity(taps as usize);
            for k in 0..taps {
                let j = left + k;
                let w = kscale * bicubic_weight(kscale * (u - j as f64), BICUBIC_A);
                if w == 0.0 {
                    continue;
                }
                indices.push((j.clamp(1, in_len as isize) - 1) as usize);
                weights.push(w);
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            AxisTaps { indices, weights }
        })
        .collect()
}

/// Separable bicubic resize of every plane of `img`.
pub fn resize_bicubic(
    img: &ImageTensor,
    out_h: usize,
    out_w: usize,
    antialias: bool,
) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        bail!(Argument, "output size must be at least 1x1, got {out_h}x{out_w}");
    }
    let [b, c, h, w] = img.shape();
    let rows = axis_taps(h, out_h, antialias);
    let cols = axis_taps(w, out_w, antialias);
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    let mut tmp = vec![0f64; h * out_w];
    for bi in 0..b {
        for ci in 0..c {
            let plane = img.plane(bi, ci);
            for y in 0..h {
                for (x, tap) in cols.iter().enumerate() {
                    tmp[y * out_w + x] = tap
                        .indices
                        .iter()
                        .zip(&tap.weights)
                        .map(|(&j, &wt)| plane[y * w + j] as f64 * wt)
                        .sum();
                }
            }
            for tap in &rows {
                for x in 0..out_w {
                    let v: f64 = tap
                        .indices
                        .iter()
                        .zip(&tap.weights)
                        .map(|(&i, &wt)| tmp[i * out_w + x] * wt)
                        .sum();
                    out.push(v as f32);
                }
            }
        }
    }
    ImageTensor::new(out, [b, c, out_h, out_w], img.range())
}

/// Crops `img` so both spatial dims are multiples of `scale`.
pub fn modcrop(img: &ImageTensor, scale: usize) -> Result<ImageTensor> {
    let h = img.height() - img.height() % scale;
    let w = img.width() - img.width() % scale;
    if h == 0 || w == 0 {
        bail!(
            Argument,
            "{}x{} image is smaller than scale {scale}",
            img.height(),
            img.width()
        );
    }
    img.crop(0, 0, h, w)
}

/// Bicubic (antialiased) downscale by an integer factor after modcrop.
pub fn degrade(hr: &ImageTensor, scale: usize) -> Result<ImageTensor> {
    let hr = modcrop(hr, scale)?;
    resize_bicubic(&hr, hr.height() / scale, hr.width() / scale, true)
}

/// Element of the dihedral group of the square: optional horizontal flip
/// followed by `quarter_turns` counter-clockwise rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub quarter_turns: u8,
    pub hflip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        quarter_turns: 0,
        hflip: false,
    };

    pub fn all() -> [Dihedral; 8] {
        let mut out = [Self::IDENTITY; 8];
        for (i, d) in out.iter_mut().enumerate() {
            d.quarter_turns = (i % 4) as u8;
            d.hflip = i >= 4;
        }
        out
    }

    pub fn swaps_axes(self) -> bool {
        self.quarter_turns % 2 == 1
    }

    pub fn apply(self, img: &ImageTensor) -> ImageTensor {
        let mut out = if self.hflip { hflip(img) } else { img.clone() };
        for _ in 0..self.quarter_turns % 4 {
            out = rot90_ccw(&out);
        }
        out
    }

    pub fn invert(self, img: &ImageTensor) -> ImageTensor {
        let mut out = img.clone();
        for _ in 0..(4 - self.quarter_turns % 4) % 4 {
            out = rot90_ccw(&out);
        }
        if self.hflip {
            hflip(&out)
        } else {
            out
        }
    }
}

fn remap(
    img: &ImageTensor,
    out_h: usize,
    out_w: usize,
    src: impl Fn(usize, usize) -> (usize, usize),
) -> ImageTensor {
    let [b, c, _, _] = img.shape();
    ImageTensor::from_fn([b, c, out_h, out_w], img.range(), |bi, ci, y, x| {
        let (sy, sx) = src(y, x);
        img.get(bi, ci, sy, sx)
    })
    .expect("remap preserves finiteness")
}

pub fn hflip(img: &ImageTensor) -> ImageTensor {
    let w = img.width();
    remap(img, img.height(), w, |y, x| (y, w - 1 - x))
}

pub fn vflip(img: &ImageTensor) -> ImageTensor {
    let h = img.height();
    remap(img, h, img.width(), |y, x| (h - 1 - y, x))
}

/// Rotates a quarter turn counter-clockwise: `out[y][x] = in[x][W-1-y]`.
pub fn rot90_ccw(img: &ImageTensor) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    remap(img, w, h, |y, x| (x, w - 1 - y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub hr_path: PathBuf,
    /// Pre-generated LR file; synthesized from HR when absent.
    pub lr_path: Option<PathBuf>,
    pub scale: usize,
    pub hr_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub scale: usize,
    pub entries: Vec<ManifestEntry>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

impl DatasetManifest {
    /// Scans `<root>/HR/*.png`, pairing each with `<root>/LR_bicubic/X{s}/`
    /// files named either `<stem>.png` or `<stem>x{s}.png` when present.
    /// Entries are sorted by path.
    pub fn scan(root: impl AsRef<Path>, scale: usize, split: Split) -> Result<Self> {
        let root = root.as_ref();
        if !matches!(scale, 2..=4) {
            bail!(Argument, "scale must be 2, 3 or 4 (got {scale})");
        }
        let hr_dir = root.join("HR");
        let lr_dir = root.join("LR_bicubic").join(format!("X{scale}"));
        let mut entries = Vec::new();
        for hr_path in list_pngs(&hr_dir)? {
            let stem = hr_path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let lr_path = [format!("{stem}.png"), format!("{stem}x{scale}.png")]
                .into_iter()
                .map(|n| lr_dir.join(n))
                .find(|p| p.is_file());
            entries.push(ManifestEntry {
                name: stem,
                hr_sha256: sha256_file(&hr_path)?,
                hr_path,
                lr_path,
                scale,
            });
        }
        let manifest = Self {
            root: root.to_path_buf(),
            split,
            scale,
            entries,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.hr_path) {
                bail!(Data, "duplicate manifest path {}", e.hr_path.display());
            }
            if e.scale != self.scale {
                bail!(Data, "entry {} has scale {} != {}", e.name, e.scale, self.scale);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Entries whose HR file no longer matches the recorded content hash.
    pub fn stale_entries(&self) -> Result<Vec<&ManifestEntry>> {
        let mut out = Vec::new();
        for e in &self.entries {
            if !e.hr_path.is_file() || sha256_file(&e.hr_path)? != e.hr_sha256 {
                out.push(e);
            }
        }
        Ok(out)
    }
}

/// An aligned HR/LR pair. `hr` is modcropped so that its size is exactly
/// `scale` times the LR size.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub name: String,
    pub hr: ImageTensor,
    pub lr: ImageTensor,
    pub scale: usize,
}

impl ImagePair {
    pub fn from_hr(name: impl Into<String>, hr: &ImageTensor, scale: usize) -> Result<Self> {
        let hr = modcrop(hr, scale)?;
        let lr = resize_bicubic(&hr, hr.height() / scale, hr.width() / scale, true)?;
        Ok(Self {
            name: name.into(),
            hr,
            lr,
            scale,
        })
    }

    pub fn load(entry: &ManifestEntry) -> Result<Self> {
        let hr = ImageTensor::load_png(&entry.hr_path)?;
        let s = entry.scale;
        match &entry.lr_path {
            None => Self::from_hr(entry.name.clone(), &hr, s),
            Some(lr_path) => {
                let lr = ImageTensor::load_png(lr_path)?;
                let (eh, ew) = (hr.height() / s, hr.width() / s);
                if (lr.height(), lr.width()) != (eh, ew) {
                    bail!(
                        Data,
                        "{}: LR is {}x{}, expected floor(HR/{s}) = {eh}x{ew}",
                        lr_path.display(),
                        lr.height(),
                        lr.width()
                    );
                }
                Ok(Self {
                    name: entry.name.clone(),
                    hr: hr.crop(0, 0, eh * s, ew * s)?,
                    lr,
                    scale: s,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub hr_patch: usize,
    pub scale: usize,
}

impl PatchSpec {
    pub fn new(hr_patch: usize, scale: usize) -> Result<Self> {
        if scale == 0 || hr_patch == 0 || !hr_patch.is_multiple_of(scale) {
            bail!(
                Config,
                "HR patch {hr_patch} must be a positive multiple of scale {scale}"
            );
        }
        Ok(Self { hr_patch, scale })
    }

    pub fn lr_patch(&self) -> usize {
        self.hr_patch / self.scale
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub hflip: bool,
    /// Allowed rotations in degrees, a subset of {0, 90, 180, 270}.
    pub rotations: Vec<u16>,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            hflip: true,
            rotations: vec![0, 90, 180, 270],
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    pub fn none() -> Self {
        Self {
            hflip: false,
            rotations: vec![0],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotations.contains(&0) {
            bail!(Config, "augmentation rotations must include 0");
        }
        if let Some(r) = self.rotations.iter().find(|r| !matches!(r, 0 | 90 | 180 | 270)) {
            bail!(Config, "unsupported rotation {r} (allowed: 0, 90, 180, 270)");
        }
        Ok(())
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Dihedral {
        let hflip = self.hflip && rng.random_bool(0.5);
        let rot = self.rotations[rng.random_range(0..self.rotations.len())];
        Dihedral {
            quarter_turns: (rot / 90) as u8,
            hflip,
        }
    }
}

/// Aligned crop pair plus the transform applied to both.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub hr: ImageTensor,
    pub lr: ImageTensor,
    pub hr_origin: (usize, usize),
    pub lr_origin: (usize, usize),
    pub transform: Dihedral,
}

/// Crops aligned patches: the HR origin is a multiple of the scale and the
/// LR origin is that origin divided by the scale. Returns `None` (with a
/// warning) when the image is smaller than the patch.
pub fn sample_patch(
    pair: &ImagePair,
    spec: &PatchSpec,
    aug: &AugmentationSpec,
    rng: &mut impl Rng,
) -> Result<Option<PatchPair>> {
    if spec.scale != pair.scale {
        bail!(
            Argument,
            "patch scale {} does not match pair scale {}",
            spec.scale,
            pair.scale
        );
    }
    let lp = spec.lr_patch();
    let (lh, lw) = (pair.lr.height(), pair.lr.width());
    if lh < lp || lw < lp {
        log::warn!(
            "skipping {}: {}x{} HR is smaller than the {} patch",
            pair.name,
            pair.hr.height(),
            pair.hr.width(),
            spec.hr_patch
        );
        return Ok(None);
    }
    let ly = rng.random_range(0..=lh - lp);
    let lx = rng.random_range(0..=lw - lp);
    let (hy, hx) = (ly * spec.scale, lx * spec.scale);
    let hr = pair.hr.crop(hy, hx, spec.hr_patch, spec.hr_patch)?;
    let lr = pair.lr.crop(ly, lx, lp, lp)?;
    let transform = aug.draw(rng);
    Ok(Some(PatchPair {
        hr: transform.apply(&hr),
        lr: transform.apply(&lr),
        hr_origin: (hy, hx),
        lr_origin: (ly, lx),
        transform,
    }))
}

/// Derives an independent stream for `(seed, iteration, index)`.
pub fn derived_rng(seed: u64, iteration: u64, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(iteration.to_le_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Deterministic minibatch source over in-memory pairs. Every sample is
/// drawn from its own stream derived from `(seed, iteration, slot)`, so
/// batches do not depend on call order.
#[derive(Debug, Clone)]
pub struct PatchSampler {
    pairs: Vec<ImagePair>,
    spec: PatchSpec,
    aug: AugmentationSpec,
}

impl PatchSampler {
    pub fn new(pairs: Vec<ImagePair>, spec: PatchSpec, aug: AugmentationSpec) -> Result<Self> {
        aug.validate()?;
        let lp = spec.lr_patch();
        let usable: Vec<_> = pairs
            .into_iter()
            .filter(|p| {
                let ok = p.lr.height() >= lp && p.lr.width() >= lp;
                if !ok {
                    log::warn!("dropping {} from the patch pool: smaller than patch", p.name);
                }
                ok
            })
            .collect();
        if usable.is_empty() {
            bail!(Data, "no training image is at least {} pixels", spec.hr_patch);
        }
        Ok(Self {
            pairs: usable,
            spec,
            aug,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn spec(&self) -> &PatchSpec {
        &self.spec
    }

    /// `(hr, lr)` batches of `batch_size` patches.
    pub fn batch(&self, iteration: u64, batch_size: usize) -> Result<(ImageTensor, ImageTensor)> {
        let mut hrs = Vec::with_capacity(batch_size);
        let mut lrs = Vec::with_capacity(batch_size);
        for slot in 0..batch_size as u64 {
            let mut rng = derived_rng(self.aug.seed, iteration, slot);
            let pair = &self.pairs[rng.random_range(0..self.pairs.len())];
            let patch = sample_patch(pair, &self.spec, &self.aug, &mut rng)?
                .expect("pool only holds images at least one patch in size");
            hrs.push(patch.hr);
            lrs.push(patch.lr);
        }
        Ok((ImageTensor::stack(&hrs)?, ImageTensor::stack(&lrs)?))
    }
}

/// Procedural RGB test image: smooth gradients, oriented sinusoids and a
/// few hard-edged discs, all in `[0, 1]`.
pub fn synthetic_image(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut waves = Vec::new();
    for _ in 0..3 {
        let freq = rng.random_range(0.02..0.25);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp: [f64; 3] = [
            rng.random_range(0.05..0.2),
            rng.random_range(0.05..0.2),
            rng.random_range(0.05..0.2),
        ];
        waves.push((freq, angle.cos(), angle.sin(), phase, amp));
    }
    let discs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
                rng.random_range(2.0..(height.min(width) as f64 / 3.0).max(3.0)),
                [
                    rng.random_range(-0.25..0.25),
                    rng.random_range(-0.25..0.25),
                    rng.random_range(-0.25..0.25),
                ],
            )
        })
        .collect();
    let base: [f64; 3] = [
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
    ];
    let gy = rng.random_range(-0.2..0.2);
    let gx = rng.random_range(-0.2..0.2);
    ImageTensor::from_fn([1, 3, height, width], ValueRange::Unit, |_, c, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let mut v = base[c] + gy * yf / height as f64 + gx * xf / width as f64;
        for (freq, ca, sa, phase, amp) in &waves {
            v += amp[c] * (std::f64::consts::TAU * freq * (ca * xf + sa * yf) + phase).sin();
        }
        for (cy, cx, r, tint) in &discs {
            if (yf - cy).powi(2) + (xf - cx).powi(2) <= r * r {
                v += tint[c];
            }
        }
        v.clamp(0.0, 1.0) as f32
    })
    .expect("finite by construction")
}

/// `n` synthetic HR images of size `size`, degraded by `scale`.
pub fn synthetic_corpus(n: usize, size: usize, scale: usize, seed: u64) -> Result<Vec<ImagePair>> {
    (0..n)
        .map(|i| {
            let hr = synthetic_image(size, size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            ImagePair::from_hr(format!("synthetic_{i:04}"), &hr, scale)
        })
        .collect()
}
