//! Feature-map intensity tracing and the G-index.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use ::image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::image::ImageTensor;
use crate::model::{Network, TapSite};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapLevel {
    PerRdg,
    PerSdrcb,
    PerStage,
}

impl std::str::FromStr for TapLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_rdg" => Ok(TapLevel::PerRdg),
            "per_sdrcb" => Ok(TapLevel::PerSdrcb),
            "per_stage" => Ok(TapLevel::PerStage),
            other => Err(Error::Argument(format!(
                "unknown tap level `{other}` (per_rdg, per_sdrcb, per_stage)"
            ))),
        }
    }
}

impl TapLevel {
    pub fn includes(self, site: &TapSite) -> bool {
        match site {
            TapSite::Shallow | TapSite::PostTransition => true,
            TapSite::Rdg(_) => self == TapLevel::PerRdg,
            TapSite::Sdrcb { .. } => self != TapLevel::PerRdg,
            TapSite::Stage { .. } => self == TapLevel::PerStage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    pub name: String,
    /// Position of the tap among all probe points of the forward pass, so
    /// indices line up across tap levels.
    pub layer_index: usize,
    pub g_min: f64,
    pub g_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityTrace {
    pub input_id: String,
    pub taps: Vec<Tap>,
}

impl IntensityTrace {
    pub fn new(input_id: impl Into<String>, taps: Vec<Tap>) -> Result<Self> {
        let t = Self {
            input_id: input_id.into(),
            taps,
        };
        t.validate()?;
        Ok(t)
    }

    /// Trace from bare `(g_min, g_max)` pairs with sequential indices.
    pub fn from_extrema(input_id: impl Into<String>, extrema: &[(f64, f64)]) -> Result<Self> {
        let taps = extrema
            .iter()
            .enumerate()
            .map(|(i, &(g_min, g_max))| Tap {
                name: format!("tap.{i}"),
                layer_index: i,
                g_min,
                g_max,
            })
            .collect();
        Self::new(input_id, taps)
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.taps {
            if !(t.g_min.is_finite() && t.g_max.is_finite()) || t.g_min > t.g_max {
                bail!(Data, "tap {} has invalid extrema ({}, {})", t.name, t.g_min, t.g_max);
            }
        }
        if self.taps.windows(2).any(|w| w[0].layer_index >= w[1].layer_index) {
            bail!(Data, "tap layer indices must be strictly increasing");
        }
        Ok(())
    }

    /// Taps from the shallow feature through the last RDG output, which is
    /// the span the residual chain maps identically at identity init.
    pub fn chain(&self) -> Self {
        Self {
            input_id: self.input_id.clone(),
            taps: self
                .taps
                .iter()
                .filter(|t| t.name != TapSite::PostTransition.name())
                .cloned()
                .collect(),
        }
    }

    pub fn reversed(&self) -> Self {
        let n = self.taps.len();
        let taps = self
            .taps
            .iter()
            .rev()
            .enumerate()
            .map(|(i, t)| Tap {
                layer_index: i,
                ..t.clone()
            })
            .collect::<Vec<_>>();
        debug_assert_eq!(taps.len(), n);
        Self {
            input_id: self.input_id.clone(),
            taps,
        }
    }
}

fn extrema(t: &Tensor) -> Result<(f64, f64)> {
    let flat = t.flatten_all()?.to_dtype(DType::F64)?;
    Ok((flat.min(0)?.to_scalar()?, flat.max(0)?.to_scalar()?))
}

/// One forward pass recording the extrema of every selected feature map,
/// taken over the whole batch, channel and spatial volume.
pub fn record_trace(
    net: &Network,
    lr: &ImageTensor,
    input_id: &str,
    level: TapLevel,
) -> Result<IntensityTrace> {
    let x = lr.to_tensor(net.dtype(), net.device())?;
    let mut taps = Vec::new();
    let mut depth = 0usize;
    let mut probe = |site: TapSite, feature: &Tensor| -> Result<()> {
        if level.includes(&site) {
            let (g_min, g_max) = extrema(feature)?;
            taps.push(Tap {
                name: site.name(),
                layer_index: depth,
                g_min,
                g_max,
            });
        }
        depth += 1;
        Ok(())
    };
    net.forward_probed(&x, &mut probe)?;
    if taps.is_empty() {
        bail!(Argument, "tap level {level:?} selected no probe points");
    }
    IntensityTrace::new(input_id, taps)
}

/// Sum over consecutive taps of `|dg_min| + |dg_max|`.
pub fn g_index(trace: &IntensityTrace) -> Result<f64> {
    if trace.taps.len() < 2 {
        bail!(
            Argument,
            "G-index needs at least two taps, trace has {}",
            trace.taps.len()
        );
    }
    Ok(trace
        .taps
        .windows(2)
        .map(|w| (w[1].g_min - w[0].g_min).abs() + (w[1].g_max - w[0].g_max).abs())
        .sum())
}

pub fn save_trace(trace: &IntensityTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(trace)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<IntensityTrace> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let trace: IntensityTrace = serde_json::from_str(&text)?;
    trace.validate()?;
    Ok(trace)
}

/// Writes `path` (JSON) and a chart next to it with a `.png` extension.
pub fn export_trace(trace: &IntensityTrace, path: impl AsRef<Path>) -> Result<(PathBuf, ChartSummary)> {
    let path = path.as_ref();
    save_trace(trace, path)?;
    let chart = path.with_extension("png");
    let summary = render_chart(std::slice::from_ref(trace), &chart)?;
    Ok((chart, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartSummary {
    pub width: u32,
    pub height: u32,
    pub x_ticks: usize,
    pub series: usize,
    pub y_range: (f64, f64),
}

const CHART_W: u32 = 640;
const CHART_H: u32 = 360;
const MARGIN: u32 = 40;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
];

/// Line chart of `g_min` and `g_max` against tap position for each trace.
/// Traces are drawn in palette order, minima dashed. All traces share the
/// x axis, so they must have the same tap count.
pub fn render_chart(traces: &[IntensityTrace], path: impl AsRef<Path>) -> Result<ChartSummary> {
    let Some(first) = traces.first() else {
        bail!(Argument, "no traces to plot");
    };
    let n = first.taps.len();
    if n == 0 || traces.iter().any(|t| t.taps.len() != n) {
        bail!(Argument, "traces must share a non-zero tap count");
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in traces.iter().flat_map(|t| &t.taps) {
        lo = lo.min(t.g_min);
        hi = hi.max(t.g_max);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let mut img = RgbImage::from_pixel(CHART_W, CHART_H, Rgb([255, 255, 255]));
    let (x0, x1) = (MARGIN as f64, (CHART_W - MARGIN / 2) as f64);
    let (y0, y1) = ((CHART_H - MARGIN) as f64, (MARGIN / 2) as f64);
    let px = |i: usize| {
        if n == 1 {
            (x0 + x1) / 2.0
        } else {
            x0 + (x1 - x0) * i as f64 / (n - 1) as f64
        }
    };
    let py = |v: f64| y0 + (y1 - y0) * (v - lo) / (hi - lo);

    let axis = Rgb([0, 0, 0]);
    line(&mut img, (x0, y0), (x1, y0), axis, None);
    line(&mut img, (x0, y0), (x0, y1), axis, None);
    for i in 0..n {
        line(&mut img, (px(i), y0), (px(i), y0 + 5.0), axis, None);
    }
    if lo < 0.0 && hi > 0.0 {
        line(&mut img, (x0, py(0.0)), (x1, py(0.0)), Rgb([200, 200, 200]), Some(3));
    }
    for (k, trace) in traces.iter().enumerate() {
        let colour = Rgb(PALETTE[k % PALETTE.len()]);
        for (dash, pick) in [
            (Some(4), (|t: &Tap| t.g_min) as fn(&Tap) -> f64),
            (None, |t: &Tap| t.g_max),
        ] {
            for i in 1..n {
                let a = (px(i - 1), py(pick(&trace.taps[i - 1])));
                let b = (px(i), py(pick(&trace.taps[i])));
                line(&mut img, a, b, colour, dash);
            }
            for i in 0..n {
                marker(&mut img, (px(i), py(pick(&trace.taps[i]))), colour);
            }
        }
    }
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path)?;
    Ok(ChartSummary {
        width: CHART_W,
        height: CHART_H,
        x_ticks: n,
        series: 2 * traces.len(),
        y_range: (lo, hi),
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>, dash: Option<usize>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        if dash.is_some_and(|d| (s / d) % 2 == 1) {
            continue;
        }
        let t = s as f64 / steps as f64;
        let x = (a.0 + (b.0 - a.0) * t).round() as i64;
        let y = (a.1 + (b.1 - a.1) * t).round() as i64;
        put(img, x, y, c);
    }
}

fn marker(img: &mut RgbImage, p: (f64, f64), c: Rgb<u8>) {
    let (x, y) = (p.0.round() as i64, p.1.round() as i64);
    for dy in -2..=2 {
        for dx in -2..=2 {
            put(img, x + dx, y + dy, c);
        }
    }
}
