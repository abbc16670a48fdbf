//! Parameter storage and the handful of layers the network is assembled from.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// One named trainable tensor, detached from the compute graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl ParameterRecord {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// All trainable tensors of a model, keyed by hierarchical dotted path.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.dims().to_vec()))
            .collect()
    }

    pub fn records(&self) -> Result<Vec<ParameterRecord>> {
        self.vars
            .iter()
            .map(|(name, var)| {
                Ok(ParameterRecord {
                    name: name.clone(),
                    shape: var.dims().to_vec(),
                    values: var
                        .as_tensor()
                        .to_dtype(DType::F32)?
                        .flatten_all()?
                        .to_vec1::<f32>()?,
                })
            })
            .collect()
    }

    /// Overwrites parameter values in place. Every stored parameter must be
    /// present in `records` with an identical shape.
    pub fn load_records(&self, records: &[ParameterRecord]) -> Result<()> {
        let by_name: BTreeMap<&str, &ParameterRecord> =
            records.iter().map(|r| (r.name.as_str(), r)).collect();
        for (name, var) in &self.vars {
            let Some(rec) = by_name.get(name.as_str()) else {
                bail!(Checkpoint, "missing parameter {name}");
            };
            if rec.shape != var.dims() {
                bail!(
                    Checkpoint,
                    "parameter {name}: stored shape {:?}, expected {:?}",
                    rec.shape,
                    var.dims()
                );
            }
            let t = Tensor::from_slice(&rec.values, rec.shape.as_slice(), &self.device)?
                .to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        if let Some(extra) = records
            .iter()
            .find(|r| !self.vars.contains_key(&r.name))
        {
            bail!(Checkpoint, "unknown parameter {}", extra.name);
        }
        Ok(())
    }

    /// Sets one parameter to zero.
    pub fn zero(&self, name: &str) -> Result<()> {
        let Some(var) = self.vars.get(name) else {
            bail!(Argument, "no parameter named {name}");
        };
        var.set(&var.as_tensor().zeros_like()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation, resampled outside two sigma.
    TruncNormal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

struct BuildState {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

/// Hands out freshly initialised parameters under a path prefix.
/// Draws from one seeded stream, so a given build order and seed
/// always yields the same values.
#[derive(Clone)]
pub struct ParamBuilder {
    state: Rc<RefCell<BuildState>>,
    prefix: String,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            state: Rc::new(RefCell::new(BuildState {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                dtype,
                device: device.clone(),
            })),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            state: self.state.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.state.borrow().dtype
    }

    pub fn device(&self) -> Device {
        self.state.borrow().device.clone()
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let path = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut st = self.state.borrow_mut();
        if st.vars.contains_key(&path) {
            bail!(Config, "parameter {path} registered twice");
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut st.rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            Init::Uniform(bound) => (0..n)
                .map(|_| st.rng.random_range(-bound..=bound))
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &st.device)?.to_dtype(st.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        st.vars.insert(path, var);
        Ok(out)
    }

    /// Consumes the builder and returns every parameter registered through it
    /// or any of its clones.
    pub fn finish(self) -> ParamStore {
        let st = self.state.borrow();
        ParamStore {
            vars: st.vars.clone(),
            dtype: st.dtype,
            device: st.device.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get(&[out_dim, in_dim], "weight", Init::TruncNormal(0.02))?,
            bias: pb.get(&[out_dim], "bias", Init::Zeros)?,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// Applies `x W^T + b` over the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / in_dim;
        let y = x
            .reshape((rows, in_dim))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Stride-1 "same" convolution on `[B, C, H, W]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
}

impl Conv2d {
    pub fn new(pb: &ParamBuilder, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: pb.get(&[out_ch, in_ch, kernel, kernel], "weight", Init::Uniform(bound))?,
            bias: pb.get(&[out_ch], "bias", Init::Zeros)?,
            padding: kernel / 2,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels() {
            bail!(
                Shape,
                "convolution expects {} input channels, got {c}",
                self.in_channels()
            );
        }
        let y = x.conv2d(&self.weight, self.padding, 1, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.out_channels(), 1, 1))?)?)
    }

    /// Same convolution applied to a channels-last `[B, H, W, C]` tensor.
    /// 1x1 kernels reduce to a matrix product.
    pub fn forward_channels_last(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.in_channels() {
            bail!(
                Shape,
                "convolution expects {} input channels, got {c}",
                self.in_channels()
            );
        }
        if self.kernel() == 1 {
            let out = self.out_channels();
            let wmat = self.weight.reshape((out, c))?;
            let y = x
                .reshape((b * h * w, c))?
                .matmul(&wmat.t()?)?
                .broadcast_add(&self.bias)?;
            Ok(y.reshape((b, h, w, out))?)
        } else {
            let y = self.forward(&x.permute((0, 3, 1, 2))?.contiguous()?)?;
            Ok(y.permute((0, 2, 3, 1))?.contiguous()?)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: pb.get(&[dim], "weight", Init::Ones)?,
            bias: pb.get(&[dim], "bias", Init::Zeros)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}
