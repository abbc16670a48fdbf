//! The end-to-end super-resolution network: shallow 3x3 convolution, a chain
//! of residual dense groups followed by one transition convolution, and a
//! sub-pixel reconstruction head.

pub mod attention;
pub mod dense;

use candle_core::{DType, Device, Tensor};

use crate::config::{ModelConfig, DF2K_RGB_MEAN};
use crate::error::{bail, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::nn::{leaky_relu, Conv2d, ParamBuilder, ParamStore};
use attention::{build_shift_mask, ShiftMask};
use dense::Rdg;

/// A point in the forward pass where intermediate features can be observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapSite {
    /// `F_0`, output of the shallow convolution.
    Shallow,
    /// Output `Z_j` of dense stage `stage` (1-based).
    Stage {
        rdg: usize,
        block: usize,
        stage: usize,
        input_width: usize,
    },
    /// Output of one SDRCB.
    Sdrcb { rdg: usize, block: usize },
    /// `F_i`, output of RDG `i` (0-based).
    Rdg(usize),
    /// `F_DF`, output of the transition convolution after the last RDG.
    PostTransition,
}

impl TapSite {
    pub fn name(&self) -> String {
        match *self {
            TapSite::Shallow => "shallow".into(),
            TapSite::Stage {
                rdg, block, stage, ..
            } => format!("rdg.{rdg}.sdrcb.{block}.stage.{stage}"),
            TapSite::Sdrcb { rdg, block } => format!("rdg.{rdg}.sdrcb.{block}"),
            TapSite::Rdg(i) => format!("rdg.{i}"),
            TapSite::PostTransition => "post_transition".into(),
        }
    }
}

/// Receives intermediate features during a forward pass. Features are
/// cropped to the unpadded spatial extent; their memory layout (channels
/// first or last) depends on the site.
pub trait FeatureProbe {
    fn observe(&mut self, site: TapSite, feature: &Tensor) -> Result<()>;
}

impl<F: FnMut(TapSite, &Tensor) -> Result<()>> FeatureProbe for F {
    fn observe(&mut self, site: TapSite, feature: &Tensor) -> Result<()> {
        self(site, feature)
    }
}

pub(crate) struct TapCtx<'a> {
    probe: Option<&'a mut dyn FeatureProbe>,
    valid: (usize, usize),
}

impl<'a> TapCtx<'a> {
    pub(crate) fn none() -> Self {
        Self {
            probe: None,
            valid: (0, 0),
        }
    }

    /// `feature` is channels-last and possibly padded.
    pub(crate) fn emit(&mut self, site: TapSite, feature: &Tensor) -> Result<()> {
        if let Some(probe) = self.probe.as_deref_mut() {
            let (h, w) = self.valid;
            let cropped = feature.narrow(1, 0, h)?.narrow(2, 0, w)?;
            probe.observe(site, &cropped)?;
        }
        Ok(())
    }

    fn emit_nchw(&mut self, site: TapSite, feature: &Tensor) -> Result<()> {
        if let Some(probe) = self.probe.as_deref_mut() {
            probe.observe(site, feature)?;
        }
        Ok(())
    }
}

/// Sub-pixel rearrangement `[B, C*r*r, H, W] -> [B, C, H*r, W*r]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c % (r * r) != 0 {
        bail!(Shape, "pixel shuffle by {r} needs channels divisible by {}", r * r);
    }
    let oc = c / (r * r);
    Ok(x.reshape((b, oc, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .contiguous()?
        .reshape((b, oc, h * r, w * r))?)
}

/// Conv + LeakyReLU, sub-pixel upsampling (x2 twice for scale 4, a single
/// stage otherwise), final conv back to image channels.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub conv_before: Conv2d,
    pub upsample: Vec<(Conv2d, usize)>,
    pub conv_last: Conv2d,
}

impl Reconstruction {
    fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.embed_dim;
        let factors: &[usize] = match cfg.scale {
            2 => &[2],
            3 => &[3],
            4 => &[2, 2],
            s => bail!(Config, "unsupported scale {s}"),
        };
        let upsample = factors
            .iter()
            .enumerate()
            .map(|(i, &r)| Ok((Conv2d::new(&pb.pp("upsample").pp(i), c, c * r * r, 3)?, r)))
            .collect::<Result<_>>()?;
        Ok(Self {
            conv_before: Conv2d::new(&pb.pp("conv_before"), c, c, 3)?,
            upsample,
            conv_last: Conv2d::new(&pb.pp("conv_last"), c, cfg.in_channels, 3)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = leaky_relu(&self.conv_before.forward(x)?, 0.01)?;
        for (conv, r) in &self.upsample {
            h = pixel_shuffle(&conv.forward(&h)?, *r)?;
        }
        self.conv_last.forward(&h)
    }
}

/// Index map for reflect padding of an axis of length `n` out to `padded`.
/// Reflection repeats as often as needed, so any `n >= 1` works.
pub fn reflect_indices(n: usize, padded: usize) -> Vec<u32> {
    (0..padded)
        .map(|i| {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let m = i % period;
            (if m < n { m } else { period - m }) as u32
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    store: ParamStore,
    mean: Option<Tensor>,
    pub shallow: Conv2d,
    pub rdgs: Vec<Rdg>,
    pub conv_after_body: Conv2d,
    pub recon: Reconstruction,
}

/// Builds a network in `f32`. Initialisation is a pure function of `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Network> {
    Network::build(config, seed, DType::F32, &Device::Cpu)
}

impl Network {
    pub fn build(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let pb = ParamBuilder::new(seed, dtype, device);
        let c = config.embed_dim;
        let shallow = Conv2d::new(&pb.pp("shallow"), config.in_channels, c, 3)?;
        let rdgs = (0..config.num_rdg)
            .map(|i| Rdg::new(&pb.pp("rdg").pp(i), config))
            .collect::<Result<Vec<_>>>()?;
        let conv_after_body = Conv2d::new(&pb.pp("conv_after_body"), c, c, 3)?;
        let recon = Reconstruction::new(&pb.pp("recon"), config)?;
        let mean = if config.normalize_mean {
            Some(
                Tensor::new(&DF2K_RGB_MEAN, device)?
                    .to_dtype(dtype)?
                    .reshape((1, 3, 1, 1))?,
            )
        } else {
            None
        };
        let net = Self {
            config: config.clone(),
            store: pb.finish(),
            mean,
            shallow,
            rdgs,
            conv_after_body,
            recon,
        };
        if config.identity_init {
            net.zero_final_transitions()?;
        }
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn count_parameters(&self) -> usize {
        self.store.numel()
    }

    /// Names of the last-stage transition parameters of every SDRCB.
    pub fn final_transition_names(&self) -> Vec<String> {
        let stage = self.config.dense_stages;
        let mut names = Vec::new();
        for i in 0..self.config.num_rdg {
            for m in 0..self.config.sdrcb_per_rdg {
                for p in ["weight", "bias"] {
                    names.push(format!("rdg.{i}.sdrcb.{m}.stage.{stage}.transition.{p}"));
                }
            }
        }
        names
    }

    /// Zeroes every SDRCB final transition so each RDG becomes the identity.
    pub fn zero_final_transitions(&self) -> Result<()> {
        for name in self.final_transition_names() {
            self.store.zero(&name)?;
        }
        Ok(())
    }

    fn check_input(&self, lr: &Tensor) -> Result<()> {
        let (_, c, _, _) = lr.dims4()?;
        if c != self.config.in_channels {
            bail!(
                Shape,
                "expected {} input channels, got {c}",
                self.config.in_channels
            );
        }
        let finite = lr
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            bail!(Data, "input contains non-finite values");
        }
        Ok(())
    }

    /// `F_0`: mean removal, range scaling and the shallow 3x3 convolution.
    pub fn shallow_extract(&self, lr: &Tensor) -> Result<Tensor> {
        self.check_input(lr)?;
        let x = match &self.mean {
            Some(mean) => lr.broadcast_sub(mean)?,
            None => lr.clone(),
        };
        let x = (x * self.config.img_range)?;
        self.shallow.forward(&x)
    }

    /// `F_K`: the RDG chain applied to `F_0`, reflect-padded to window
    /// multiples on the way in and cropped on the way out.
    pub fn deep_features(&self, f0: &Tensor) -> Result<Tensor> {
        self.deep_features_tapped(f0, &mut TapCtx::none())
    }

    fn deep_features_tapped(&self, f0: &Tensor, tap: &mut TapCtx<'_>) -> Result<Tensor> {
        let (_, c, h, w) = f0.dims4()?;
        if c != self.config.embed_dim {
            bail!(Shape, "deep chain expects width {}, got {c}", self.config.embed_dim);
        }
        let ws = self.config.window_size;
        let hp = h.div_ceil(ws) * ws;
        let wp = w.div_ceil(ws) * ws;
        let mut x = f0.clone();
        if hp != h {
            let idx = Tensor::new(reflect_indices(h, hp), f0.device())?;
            x = x.index_select(&idx, 2)?;
        }
        if wp != w {
            let idx = Tensor::new(reflect_indices(w, wp), f0.device())?;
            x = x.index_select(&idx, 3)?;
        }
        let mut x = x.permute((0, 2, 3, 1))?.contiguous()?;
        let mask: Option<ShiftMask> = if (1..=self.config.dense_stages)
            .any(|j| self.config.stage_shift(j) > 0)
        {
            Some(build_shift_mask(
                hp,
                wp,
                ws,
                ws / 2,
                f0.dtype(),
                f0.device(),
            )?)
        } else {
            None
        };
        tap.valid = (h, w);
        for (i, rdg) in self.rdgs.iter().enumerate() {
            x = rdg.forward_tapped(&x, mask.as_ref(), tap, i)?;
        }
        Ok(x
            .narrow(1, 0, h)?
            .narrow(2, 0, w)?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }

    /// `F_DF = Conv(F_K)`.
    pub fn body_transition(&self, fk: &Tensor) -> Result<Tensor> {
        self.conv_after_body.forward(fk)
    }

    /// `H_rec`: maps `[B, C, H, W]` features to `[B, C_in, sH, sW]`, before
    /// the mean is added back.
    pub fn reconstruct(&self, features: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = features.dims4()?;
        if c != self.config.embed_dim {
            bail!(
                Shape,
                "reconstruction expects width {}, got {c}",
                self.config.embed_dim
            );
        }
        self.recon.forward(features)
    }

    /// Inverse of the input normalisation applied in `shallow_extract`.
    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x / self.config.img_range)?;
        Ok(match &self.mean {
            Some(mean) => x.broadcast_add(mean)?,
            None => x,
        })
    }

    /// `[B, C_in, H, W]` unit-range input to `[B, C_in, sH, sW]`.
    pub fn forward(&self, lr: &Tensor) -> Result<Tensor> {
        self.forward_tapped(lr, TapCtx::none())
    }

    /// Forward pass reporting intermediate features to `probe`.
    pub fn forward_probed(&self, lr: &Tensor, probe: &mut dyn FeatureProbe) -> Result<Tensor> {
        self.forward_tapped(
            lr,
            TapCtx {
                probe: Some(probe),
                valid: (0, 0),
            },
        )
    }

    fn forward_tapped(&self, lr: &Tensor, mut tap: TapCtx<'_>) -> Result<Tensor> {
        let f0 = self.shallow_extract(lr)?;
        tap.emit_nchw(TapSite::Shallow, &f0)?;
        let fk = self.deep_features_tapped(&f0, &mut tap)?;
        let fdf = self.body_transition(&fk)?;
        tap.emit_nchw(TapSite::PostTransition, &fdf)?;
        let out = self.reconstruct(&(f0 + fdf)?)?;
        self.denormalize(&out)
    }

    /// Convenience wrapper over `forward` for unit-range images.
    pub fn upscale(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        let x = lr.to_tensor(self.dtype(), self.device())?;
        ImageTensor::from_tensor(&self.forward(&x)?, ValueRange::Unit)
    }
}

/// Parameter count of a configuration without materialising the network.
pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let c = config.embed_dim;
    let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
    let linear = |i: usize, o: usize| i * o + o;
    let span = 2 * config.window_size - 1;
    let mut sdrcb = 0;
    for j in 1..=config.dense_stages {
        let d = config.stage_width(j);
        let hidden = config.mlp_hidden(d);
        let out = if j == config.dense_stages { c } else { config.growth() };
        sdrcb += 4 * d
            + linear(d, 3 * d)
            + linear(d, d)
            + span * span * config.num_heads
            + linear(d, hidden)
            + linear(hidden, d)
            + conv(d, out, config.transition_kernel.size());
    }
    let ups: usize = match config.scale {
        2 => conv(c, 4 * c, 3),
        3 => conv(c, 9 * c, 3),
        _ => 2 * conv(c, 4 * c, 3),
    };
    Ok(conv(config.in_channels, c, 3)
        + config.num_rdg * config.sdrcb_per_rdg * sdrcb
        + conv(c, c, 3)
        + conv(c, c, 3)
        + ups
        + conv(c, config.in_channels, 3))
}
