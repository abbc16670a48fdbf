//! Independent reference implementations shared by the integration tests.
//! Everything here works on plain `f64` slices with explicit loops.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::HashMap;

use drct::image::{ImageTensor, ValueRange};
use drct::nn::{ParamStore, ParameterRecord};
use drct::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(b: usize, h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut r = rng(seed);
    let data = (0..b * 3 * h * w).map(|_| r.random::<f32>()).collect();
    ImageTensor::new(data, [b, 3, h, w], ValueRange::Unit).unwrap()
}

/// Small network used where the desk preset would be needlessly slow.
pub fn tiny_config(scale: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: 12,
        num_rdg: 2,
        sdrcb_per_rdg: 1,
        growth: Some(6),
        num_heads: 2,
        window_size: 4,
        ..ModelConfig::desk(scale)
    }
}

/// Overwrites every parameter with uniform noise in `[-amp, amp]`.
pub fn randomize(store: &ParamStore, seed: u64, amp: f64) {
    let mut r = rng(seed);
    let records: Vec<ParameterRecord> = store
        .records()
        .unwrap()
        .into_iter()
        .map(|rec| ParameterRecord {
            values: rec
                .values
                .iter()
                .map(|_| r.random_range(-amp..amp) as f32)
                .collect(),
            ..rec
        })
        .collect();
    store.load_records(&records).unwrap();
}

pub fn params_f64(store: &ParamStore) -> HashMap<String, Vec<f64>> {
    store
        .iter()
        .map(|(name, var)| {
            let v = var
                .as_tensor()
                .to_dtype(candle_core::DType::F64)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            (name.to_string(), v)
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
        .collect()
}

/// `y = W x + b` with `W` stored `[out, in]` row-major.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, bo)| bo + (0..n_in).map(|i| w[o * n_in + i] * x[i]).sum::<f64>())
        .collect()
}

/// One Swin layer with a single window covering the whole `h x w` map and
/// no shift, evaluated as plain multi-head attention over all tokens.
/// `x` is `[h*w, c]` row-major; parameter names are relative to the layer.
pub fn global_stl(
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    heads: usize,
    p: &HashMap<String, Vec<f64>>,
) -> Vec<f64> {
    assert_eq!(h, w, "relative table is indexed by a square window");
    let n = h * w;
    let hd = c / heads;
    let token = |t: usize| &x[t * c..(t + 1) * c];
    let normed: Vec<Vec<f64>> = (0..n)
        .map(|t| layer_norm(token(t), &p["norm1.weight"], &p["norm1.bias"]))
        .collect();
    let qkv: Vec<Vec<f64>> = normed
        .iter()
        .map(|v| affine(&p["attn.qkv.weight"], &p["attn.qkv.bias"], v))
        .collect();
    let table = &p["attn.relative_position_bias_table"];
    let span = 2 * h - 1;
    let mut mixed = vec![vec![0.0; c]; n];
    for head in 0..heads {
        for i in 0..n {
            let (yi, xi) = ((i / w) as isize, (i % w) as isize);
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let (yj, xj) = ((j / w) as isize, (j % w) as isize);
                    let dot: f64 = (0..hd)
                        .map(|d| qkv[i][head * hd + d] * qkv[j][c + head * hd + d])
                        .sum();
                    let row = ((yi - yj + h as isize - 1) as usize) * span
                        + (xi - xj + w as isize - 1) as usize;
                    dot / (hd as f64).sqrt() + table[row * heads + head]
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..hd {
                mixed[i][head * hd + d] =
                    (0..n).map(|j| e[j] / z * qkv[j][2 * c + head * hd + d]).sum();
            }
        }
    }
    let mut out = Vec::with_capacity(n * c);
    for t in 0..n {
        let attn = affine(&p["attn.proj.weight"], &p["attn.proj.bias"], &mixed[t]);
        let x1: Vec<f64> = token(t).iter().zip(&attn).map(|(a, b)| a + b).collect();
        let n2 = layer_norm(&x1, &p["norm2.weight"], &p["norm2.bias"]);
        let hidden: Vec<f64> = affine(&p["mlp.fc1.weight"], &p["mlp.fc1.bias"], &n2)
            .into_iter()
            .map(gelu)
            .collect();
        let y = affine(&p["mlp.fc2.weight"], &p["mlp.fc2.bias"], &hidden);
        out.extend(x1.iter().zip(&y).map(|(a, b)| a + b));
    }
    out
}

/// Whether tokens `i` and `j` of window `(wy, wx)` of a map rolled by
/// `-shift` were adjacent before the roll, judged by whether each one's
/// source coordinate wrapped around the border.
pub fn shifted_pair_allowed(
    hp: usize,
    wp: usize,
    window: usize,
    shift: usize,
    (wy, wx): (usize, usize),
    i: usize,
    j: usize,
) -> bool {
    let wrapped = |t: usize| {
        let y = wy * window + t / window;
        let x = wx * window + t % window;
        (y + shift >= hp, x + shift >= wp)
    };
    wrapped(i) == wrapped(j)
}

/// MATLAB `imresize` bicubic weights for one axis, written out from the
/// published formula: centre `u = i/s + (1 - 1/s)/2`, kernel stretched by
/// `1/s` when shrinking, indices clamped, weights normalised.
pub fn matlab_axis_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let cubic = |x: f64| {
        let a = x.abs();
        if a <= 1.0 {
            1.5 * a.powi(3) - 2.5 * a.powi(2) + 1.0
        } else if a <= 2.0 {
            -0.5 * a.powi(3) + 2.5 * a.powi(2) - 4.0 * a + 2.0
        } else {
            0.0
        }
    };
    let s = n_out as f64 / n_in as f64;
    let k = if s < 1.0 { s } else { 1.0 };
    (1..=n_out)
        .map(|i| {
            let u = i as f64 / s + 0.5 * (1.0 - 1.0 / s);
            let mut acc: HashMap<usize, f64> = HashMap::new();
            let reach = (2.0 / k).ceil() as isize + 2;
            let centre = u.floor() as isize;
            for j in centre - reach..=centre + reach {
                let wgt = k * cubic(k * (u - j as f64));
                if wgt != 0.0 {
                    let idx = (j.clamp(1, n_in as isize) - 1) as usize;
                    *acc.entry(idx).or_default() += wgt;
                }
            }
            let total: f64 = acc.values().sum();
            let mut v: Vec<(usize, f64)> = acc.into_iter().map(|(i, w)| (i, w / total)).collect();
            v.sort_by_key(|e| e.0);
            v
        })
        .collect()
}

/// Direct 2-D evaluation of the separable bicubic resize of one plane.
pub fn resize_plane_direct(plane: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let wy = matlab_axis_weights(h, oh);
    let wx = matlab_axis_weights(w, ow);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for &(iy, a) in &wy[y] {
                for &(ix, b) in &wx[x] {
                    s += a * b * plane[iy * w + ix];
                }
            }
            out[y * ow + x] = s;
        }
    }
    out
}

fn quantize(v: f32) -> f64 {
    (v * 255.0).round().clamp(0.0, 255.0) as f64
}

/// Brute-force PSNR on 8-bit quantised values after cropping `crop` pixels.
pub fn psnr_direct(a: &ImageTensor, b: &ImageTensor, crop: usize) -> f64 {
    let [bn, cn, h, w] = a.shape();
    let mut se = 0.0;
    let mut n = 0usize;
    for bi in 0..bn {
        for ci in 0..cn {
            for y in crop..h - crop {
                for x in crop..w - crop {
                    let d = quantize(a.get(bi, ci, y, x)) - quantize(b.get(bi, ci, y, x));
                    se += d * d;
                    n += 1;
                }
            }
        }
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        100.0
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

/// Brute-force SSIM: for every valid 11x11 window position, weighted
/// statistics under a 2-D Gaussian (sigma 1.5), averaged over positions
/// and channels.
pub fn ssim_direct(a: &ImageTensor, b: &ImageTensor, crop: usize) -> f64 {
    let [bn, cn, h, w] = a.shape();
    let (h2, w2) = (h - 2 * crop, w - 2 * crop);
    let mut g = [[0.0f64; 11]; 11];
    let mut gs = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
            *v = (-d2 / (2.0 * 1.5 * 1.5)).exp();
            gs += *v;
        }
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut total = 0.0;
    for bi in 0..bn {
        for ci in 0..cn {
            let pa = |y: usize, x: usize| quantize(a.get(bi, ci, y + crop, x + crop));
            let pb = |y: usize, x: usize| quantize(b.get(bi, ci, y + crop, x + crop));
            let mut acc = 0.0;
            let mut count = 0;
            for y0 in 0..=h2 - 11 {
                for x0 in 0..=w2 - 11 {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wgt = g[i][j] / gs;
                            let (va, vb) = (pa(y0 + i, x0 + j), pb(y0 + i, x0 + j));
                            ma += wgt * va;
                            mb += wgt * vb;
                            saa += wgt * va * va;
                            sbb += wgt * vb * vb;
                            sab += wgt * va * vb;
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
    }
    total / (bn * cn) as f64
}

/// Parameter-by-parameter Adam recursion on scalars.
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
    pub t: i32,
}

impl ScalarAdam {
    pub fn new() -> Self {
        Self { m: 0.0, v: 0.0, t: 0 }
    }

    pub fn step(&mut self, p: f64, g: f64, lr: f64) -> f64 {
        self.t += 1;
        self.m = 0.9 * self.m + 0.1 * g;
        self.v = 0.999 * self.v + 0.001 * g * g;
        let mh = self.m / (1.0 - 0.9f64.powi(self.t));
        let vh = self.v / (1.0 - 0.999f64.powi(self.t));
        p - lr * mh / (vh.sqrt() + 1e-8)
    }
}
