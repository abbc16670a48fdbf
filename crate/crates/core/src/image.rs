//! Dense rank-4 image batches (`[batch, channel, height, width]`) and PNG IO.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// Samples nominally in `[0, 1]`.
    #[default]
    Unit,
    /// Samples nominally in `[0, 255]`.
    EightBit,
}

impl ValueRange {
    pub fn peak(self) -> f64 {
        match self {
            ValueRange::Unit => 1.0,
            ValueRange::EightBit => 255.0,
        }
    }
}

/// Row-major `[B, C, H, W]` array of finite `f32` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Vec<f32>,
    shape: [usize; 4],
    range: ValueRange,
}

impl ImageTensor {
    pub fn new(data: Vec<f32>, shape: [usize; 4], range: ValueRange) -> Result<Self> {
        let [b, c, h, w] = shape;
        if b == 0 || c == 0 || h == 0 || w == 0 {
            bail!(Shape, "image dimensions must be positive, got {shape:?}");
        }
        if data.len() != b * c * h * w {
            bail!(
                Shape,
                "{} samples do not fill shape {shape:?}",
                data.len()
            );
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            bail!(Data, "non-finite sample {} at flat index {pos}", data[pos]);
        }
        Ok(Self { data, shape, range })
    }

    pub fn filled(shape: [usize; 4], value: f32, range: ValueRange) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(vec![value; n], shape, range)
    }

    /// Builds an image from a function of `(b, c, y, x)`.
    pub fn from_fn(
        shape: [usize; 4],
        range: ValueRange,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let [b, c, h, w] = shape;
        let mut data = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(bi, ci, y, x));
                    }
                }
            }
        }
        Self::new(data, shape, range)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, ch, h, w] = self.shape;
        ((b * ch + c) * h + y) * w + x
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(b, c, y, x)]
    }

    /// One `[H, W]` plane.
    pub fn plane(&self, b: usize, c: usize) -> &[f32] {
        let [_, _, h, w] = self.shape;
        let start = self.index(b, c, 0, 0);
        &self.data[start..start + h * w]
    }

    /// Single batch element as its own image.
    pub fn item(&self, b: usize) -> ImageTensor {
        let [_, c, h, w] = self.shape;
        let n = c * h * w;
        Self {
            data: self.data[b * n..(b + 1) * n].to_vec(),
            shape: [1, c, h, w],
            range: self.range,
        }
    }

    /// Concatenates equally shaped images along the batch axis.
    pub fn stack(items: &[ImageTensor]) -> Result<ImageTensor> {
        let Some(first) = items.first() else {
            bail!(Argument, "cannot stack an empty list of images");
        };
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut batch = 0;
        for item in items {
            let [b, ic, ih, iw] = item.shape;
            if (ic, ih, iw) != (c, h, w) {
                bail!(
                    Shape,
                    "cannot stack {:?} with {:?}",
                    item.shape,
                    first.shape
                );
            }
            batch += b;
            data.extend_from_slice(&item.data);
        }
        Ok(Self {
            data,
            shape: [batch, c, h, w],
            range: first.range,
        })
    }

    /// Rectangular spatial crop `[top..top+height, left..left+width]`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        let [b, c, h, w] = self.shape;
        if height == 0 || width == 0 || top + height > h || left + width > w {
            bail!(
                Argument,
                "crop {height}x{width} at ({top}, {left}) exceeds {h}x{w}"
            );
        }
        let mut data = Vec::with_capacity(b * c * height * width);
        for bi in 0..b {
            for ci in 0..c {
                for y in top..top + height {
                    let row = self.index(bi, ci, y, left);
                    data.extend_from_slice(&self.data[row..row + width]);
                }
            }
        }
        Ok(Self {
            data,
            shape: [b, c, height, width],
            range: self.range,
        })
    }

    /// Converts between unit and 8-bit ranges by scaling (no rounding).
    pub fn to_range(&self, range: ValueRange) -> Self {
        if range == self.range {
            return self.clone();
        }
        let factor = (range.peak() / self.range.peak()) as f32;
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            shape: self.shape,
            range,
        }
    }

    /// Rounds and clamps to integer gray levels in `[0, 255]`, in the 8-bit range.
    pub fn quantize_u8(&self) -> Self {
        let scale = (255.0 / self.range.peak()) as f32;
        Self {
            data: self
                .data
                .iter()
                .map(|v| (v * scale).round().clamp(0.0, 255.0))
                .collect(),
            shape: self.shape,
            range: ValueRange::EightBit,
        }
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Result<Self> {
        Self::new(self.data.iter().map(|&v| f(v)).collect(), self.shape, self.range)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, &self.shape, device)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor, range: ValueRange) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        let data = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(data, [b, c, h, w], range)
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Decodes an 8-bit RGB PNG into a `[1, 3, H, W]` unit-range image.
    /// 16-bit inputs are rejected.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)?;
        match img.color() {
            image::ColorType::L8
            | image::ColorType::La8
            | image::ColorType::Rgb8
            | image::ColorType::Rgba8 => {}
            other => bail!(
                Data,
                "{}: unsupported pixel format {other:?} (8-bit images only)",
                path.display()
            ),
        }
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let raw = rgb.as_raw();
        Self::from_fn([1, 3, h, w], ValueRange::Unit, |_, c, y, x| {
            raw[(y * w + x) * 3 + c] as f32 / 255.0
        })
    }

    /// Writes batch element 0 as an 8-bit RGB PNG (values rounded and clamped).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let [_, c, h, w] = self.shape;
        if c != 3 {
            bail!(Shape, "PNG export needs 3 channels, got {c}");
        }
        let q = self.quantize_u8();
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for ch in 0..3 {
                px.0[ch] = q.get(0, ch, y as usize, x as usize) as u8;
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        buf.save(path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(matches!(
            ImageTensor::new(vec![0.0, f32::NAN], [1, 1, 1, 2], ValueRange::Unit),
            Err(Error::Data(_))
        ));
        assert!(ImageTensor::new(vec![], [1, 1, 0, 2], ValueRange::Unit).is_err());
        assert!(ImageTensor::new(vec![0.0; 3], [1, 1, 2, 2], ValueRange::Unit).is_err());
    }

    #[test]
    fn crop_picks_window() {
        let img = ImageTensor::from_fn([1, 1, 4, 5], ValueRange::Unit, |_, _, y, x| {
            (y * 10 + x) as f32
        })
        .unwrap();
        let c = img.crop(1, 2, 2, 3).unwrap();
        assert_eq!(c.data(), &[12.0, 13.0, 14.0, 22.0, 23.0, 24.0]);
        assert!(img.crop(3, 0, 2, 1).is_err());
    }

    #[test]
    fn quantize_rounds_and_clamps() {
        let img =
            ImageTensor::new(vec![-0.1, 0.5, 1.2, 0.0], [1, 1, 2, 2], ValueRange::Unit).unwrap();
        assert_eq!(img.quantize_u8().data(), &[0.0, 128.0, 255.0, 0.0]);
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = ImageTensor::from_fn([1, 3, 5, 7], ValueRange::Unit, |_, c, y, x| {
            ((c * 31 + y * 7 + x * 3) % 256) as f32 / 255.0
        })
        .unwrap();
        img.save_png(&path).unwrap();
        let back = ImageTensor::load_png(&path).unwrap();
        assert_eq!(back.shape(), [1, 3, 5, 7]);
        assert!(back.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn tensor_roundtrip() {
        let img = ImageTensor::from_fn([2, 3, 2, 3], ValueRange::Unit, |b, c, y, x| {
            (b + c + y + x) as f32 * 0.1
        })
        .unwrap();
        let t = img.to_tensor(DType::F64, &Device::Cpu).unwrap();
        let back = ImageTensor::from_tensor(&t, ValueRange::Unit).unwrap();
        assert_eq!(back, img);
    }
}
