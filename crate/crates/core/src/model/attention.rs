//! Swin transformer layer: window partitioning, relative position bias,
//! shifted-window masking and windowed multi-head self-attention.
//!
//! Feature maps inside the deep chain are channels-last, `[B, H, W, C]`.

use candle_core::{DType, Device, Tensor};

use crate::error::{bail, Result};
use crate::nn::{softmax_last, Init, LayerNorm, Linear, ParamBuilder};

/// Logit offset applied to query/key pairs that straddle a shift seam.
pub const MASK_NEG: f64 = 1e4;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowOrigin {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub window_size: usize,
}

impl WindowOrigin {
    pub fn windows_per_image(&self) -> usize {
        (self.height / self.window_size) * (self.width / self.window_size)
    }
}

/// Non-overlapping windows, `[num_windows * B, w*w, C]`, ordered batch-major
/// then row-major over the window grid.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub windows: Tensor,
    pub origin: WindowOrigin,
}

pub fn window_partition(x: &Tensor, window_size: usize) -> Result<WindowBatch> {
    let (b, h, w, c) = x.dims4()?;
    if window_size == 0 || h % window_size != 0 || w % window_size != 0 {
        bail!(
            Shape,
            "feature map {h}x{w} is not a multiple of window size {window_size}"
        );
    }
    let (nh, nw) = (h / window_size, w / window_size);
    let windows = x
        .reshape((b, nh, window_size, nw, window_size, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * nh * nw, window_size * window_size, c))?;
    Ok(WindowBatch {
        windows,
        origin: WindowOrigin {
            batch: b,
            height: h,
            width: w,
            window_size,
        },
    })
}

pub fn window_reverse(wb: &WindowBatch) -> Result<Tensor> {
    let WindowOrigin {
        batch,
        height,
        width,
        window_size: ws,
    } = wb.origin;
    let (n, l, c) = wb.windows.dims3()?;
    if n != batch * wb.origin.windows_per_image() || l != ws * ws {
        bail!(
            Shape,
            "window batch {:?} does not match origin {:?}",
            wb.windows.dims(),
            wb.origin
        );
    }
    Ok(wb
        .windows
        .reshape((batch, height / ws, width / ws, ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((batch, height, width, c))?)
}

/// Index into the `(2w-1)^2` bias table for every (query, key) pair of a
/// `w x w` window, flattened row-major to length `w^4`.
pub fn relative_position_index(window_size: usize) -> Vec<u32> {
    let w = window_size as isize;
    let span = 2 * w - 1;
    let mut index = Vec::with_capacity((w * w * w * w) as usize);
    for qy in 0..w {
        for qx in 0..w {
            for ky in 0..w {
                for kx in 0..w {
                    let dy = qy - ky + w - 1;
                    let dx = qx - kx + w - 1;
                    index.push((dy * span + dx) as u32);
                }
            }
        }
    }
    index
}

/// Learned relative position bias of one attention layer.
#[derive(Debug, Clone)]
pub struct RelPosTable {
    pub bias_table: Tensor,
    pub index: Tensor,
    window_size: usize,
    heads: usize,
}

impl RelPosTable {
    fn new(pb: &ParamBuilder, window_size: usize, heads: usize) -> Result<Self> {
        let span = 2 * window_size - 1;
        let bias_table = pb.get(
            &[span * span, heads],
            "relative_position_bias_table",
            Init::TruncNormal(0.02),
        )?;
        let index = Tensor::new(relative_position_index(window_size), &pb.device())?;
        Ok(Self {
            bias_table,
            index,
            window_size,
            heads,
        })
    }

    /// Bias as `[heads, w*w, w*w]`.
    pub fn bias(&self) -> Result<Tensor> {
        let l = self.window_size * self.window_size;
        Ok(self
            .bias_table
            .index_select(&self.index, 0)?
            .reshape((l, l, self.heads))?
            .permute((2, 0, 1))?
            .contiguous()?)
    }
}

/// Additive attention mask for shifted windows, `[num_windows, w*w, w*w]`.
#[derive(Debug, Clone)]
pub struct ShiftMask {
    pub mask: Tensor,
    pub shift: usize,
}

/// Mask values as a flat row-major `[num_windows, w*w, w*w]` array.
pub fn shift_mask_values(hp: usize, wp: usize, window_size: usize, shift: usize) -> Result<Vec<f32>> {
    if window_size == 0 || !hp.is_multiple_of(window_size) || !wp.is_multiple_of(window_size) {
        bail!(
            Shape,
            "feature map {hp}x{wp} is not a multiple of window size {window_size}"
        );
    }
    if shift >= window_size {
        bail!(Argument, "shift {shift} must be smaller than window {window_size}");
    }
    let (nh, nw) = (hp / window_size, wp / window_size);
    let l = window_size * window_size;
    let mut out = vec![0f32; nh * nw * l * l];
    if shift == 0 {
        return Ok(out);
    }
    // Label the three bands [0, H-w), [H-w, H-s), [H-s, H) on each axis.
    let band = |i: usize, n: usize| -> usize {
        if i < n - window_size {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let label = |y: usize, x: usize| band(y, hp) * 3 + band(x, wp);
    for wy in 0..nh {
        for wx in 0..nw {
            let labels: Vec<usize> = (0..l)
                .map(|p| label(wy * window_size + p / window_size, wx * window_size + p % window_size))
                .collect();
            let base = (wy * nw + wx) * l * l;
            for i in 0..l {
                for j in 0..l {
                    if labels[i] != labels[j] {
                        out[base + i * l + j] = -MASK_NEG as f32;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn build_shift_mask(
    hp: usize,
    wp: usize,
    window_size: usize,
    shift: usize,
    dtype: DType,
    device: &Device,
) -> Result<ShiftMask> {
    let values = shift_mask_values(hp, wp, window_size, shift)?;
    let nw = (hp / window_size) * (wp / window_size);
    let l = window_size * window_size;
    let mask = Tensor::from_vec(values, (nw, l, l), device)?.to_dtype(dtype)?;
    Ok(ShiftMask { mask, shift })
}

/// Multi-head self-attention inside each window, with relative position bias.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub rel: RelPosTable,
    heads: usize,
    scale: f64,
}

impl WindowAttention {
    fn new(pb: &ParamBuilder, dim: usize, heads: usize, window_size: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(&pb.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&pb.pp("proj"), dim, dim)?,
            rel: RelPosTable::new(pb, window_size, heads)?,
            heads,
            scale: ((dim / heads) as f64).powf(-0.5),
        })
    }

    /// Softmax attention weights `[N, heads, L, L]` and values `[N, heads, L, hd]`.
    fn weights_and_values(&self, windows: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (n, l, c) = windows.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(windows)?
            .reshape((n, l, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * self.scale)?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut logits = q
            .matmul(&k.t()?.contiguous()?)?
            .broadcast_add(&self.rel.bias()?.unsqueeze(0)?)?;
        if let Some(mask) = mask {
            let nw = mask.dim(0)?;
            if n % nw != 0 {
                bail!(Shape, "{n} windows cannot be split by a {nw}-window mask");
            }
            logits = logits
                .reshape((n / nw, nw, self.heads, l, l))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((n, self.heads, l, l))?;
        }
        Ok((softmax_last(&logits)?, v))
    }

    /// `windows`: `[N, L, C]`; `mask`: `[nW, L, L]` with `N = B * nW`.
    pub fn forward(&self, windows: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (n, l, c) = windows.dims3()?;
        let (attn, v) = self.weights_and_values(windows, mask)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, l, c))?;
        self.proj.forward(&out)
    }

    /// Attention probabilities `[N, heads, L, L]`, for inspection.
    pub fn probabilities(&self, windows: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.weights_and_values(windows, mask)?.0)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    fn new(pb: &ParamBuilder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&pb.pp("fc1"), dim, hidden)?,
            fc2: Linear::new(&pb.pp("fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Pre-norm Swin transformer layer (STL).
#[derive(Debug, Clone)]
pub struct SwinLayer {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    dim: usize,
    window_size: usize,
    shift: usize,
}

impl SwinLayer {
    pub fn new(
        pb: &ParamBuilder,
        dim: usize,
        heads: usize,
        window_size: usize,
        shift: usize,
        mlp_hidden: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            bail!(
                Config,
                "attention width {dim} is not divisible by num_heads = {heads}"
            );
        }
        if shift != 0 && shift != window_size / 2 {
            bail!(
                Config,
                "shift must be 0 or window/2 = {} (got {shift})",
                window_size / 2
            );
        }
        Ok(Self {
            norm1: LayerNorm::new(&pb.pp("norm1"), dim, LN_EPS)?,
            attn: WindowAttention::new(&pb.pp("attn"), dim, heads, window_size)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), dim, LN_EPS)?,
            mlp: Mlp::new(&pb.pp("mlp"), dim, mlp_hidden)?,
            dim,
            window_size,
            shift,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shift(&self) -> usize {
        self.shift
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    /// `x`: `[B, Hp, Wp, C]` with `Hp`, `Wp` multiples of the window size.
    /// `mask` is required when the layer shifts; it is built on the fly if absent.
    pub fn forward(&self, x: &Tensor, mask: Option<&ShiftMask>) -> Result<Tensor> {
        let (_, hp, wp, c) = x.dims4()?;
        if c != self.dim {
            bail!(Shape, "STL expects width {}, got {c}", self.dim);
        }
        let s = self.shift;
        let owned;
        let mask = if s == 0 {
            None
        } else {
            match mask {
                Some(m) if m.shift == s => Some(&m.mask),
                _ => {
                    owned = build_shift_mask(hp, wp, self.window_size, s, x.dtype(), x.device())?;
                    Some(&owned.mask)
                }
            }
        };

        let h = self.norm1.forward(x)?;
        let h = if s > 0 {
            h.roll(-(s as i32), 1)?.roll(-(s as i32), 2)?
        } else {
            h
        };
        let wb = window_partition(&h, self.window_size)?;
        let attended = WindowBatch {
            windows: self.attn.forward(&wb.windows, mask)?,
            origin: wb.origin,
        };
        let h = window_reverse(&attended)?;
        let h = if s > 0 {
            h.roll(s as i32, 1)?.roll(s as i32, 2)?
        } else {
            h
        };
        let x = (x + h)?;
        let y = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + y)?)
    }
}
