//! Swin-dense-residual-connected blocks and the residual dense groups that chain them.

use candle_core::Tensor;

use super::attention::{ShiftMask, SwinLayer};
use super::{TapCtx, TapSite};
use crate::config::ModelConfig;
use crate::error::{bail, Result};
use crate::nn::{leaky_relu, Conv2d, ParamBuilder};

/// One dense stage: STL at the concatenated width, then a transition
/// convolution down to the growth width (or back to `C` on the last stage).
#[derive(Debug, Clone)]
pub struct DenseStage {
    pub stl: SwinLayer,
    pub transition: Conv2d,
    activate: bool,
}

#[derive(Debug, Clone)]
pub struct Sdrcb {
    pub stages: Vec<DenseStage>,
    alpha: f64,
    leaky_slope: f64,
    width: usize,
}

impl Sdrcb {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let mut stages = Vec::with_capacity(cfg.dense_stages);
        for j in 1..=cfg.dense_stages {
            let width = cfg.stage_width(j);
            let last = j == cfg.dense_stages;
            let out = if last { cfg.embed_dim } else { cfg.growth() };
            let spb = pb.pp("stage").pp(j);
            stages.push(DenseStage {
                stl: SwinLayer::new(
                    &spb.pp("stl"),
                    width,
                    cfg.num_heads,
                    cfg.window_size,
                    cfg.stage_shift(j),
                    cfg.mlp_hidden(width),
                )?,
                transition: Conv2d::new(
                    &spb.pp("transition"),
                    width,
                    out,
                    cfg.transition_kernel.size(),
                )?,
                activate: !last,
            });
        }
        Ok(Self {
            stages,
            alpha: cfg.alpha,
            leaky_slope: cfg.leaky_slope,
            width: cfg.embed_dim,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Same block with a different residual scale (shares parameters).
    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self {
            alpha,
            ..self.clone()
        }
    }

    /// `z`: `[B, Hp, Wp, C]` with window-aligned spatial dims. Returns
    /// `alpha * Z_5 + z`.
    pub fn forward(&self, z: &Tensor, mask: Option<&ShiftMask>) -> Result<Tensor> {
        self.forward_tapped(z, mask, &mut TapCtx::none(), 0, 0)
    }

    pub(crate) fn forward_tapped(
        &self,
        z: &Tensor,
        mask: Option<&ShiftMask>,
        tap: &mut TapCtx<'_>,
        rdg: usize,
        block: usize,
    ) -> Result<Tensor> {
        let (_, _, _, c) = z.dims4()?;
        if c != self.width {
            bail!(Shape, "SDRCB expects width {}, got {c}", self.width);
        }
        let mut features = vec![z.clone()];
        let mut last = None;
        for (j, stage) in self.stages.iter().enumerate() {
            let input = if features.len() == 1 {
                z.clone()
            } else {
                Tensor::cat(&features, 3)?
            };
            let input_width = input.dim(3)?;
            if input_width != stage.stl.dim() {
                bail!(
                    Shape,
                    "dense stage {} input width {input_width} != {}",
                    j + 1,
                    stage.stl.dim()
                );
            }
            let h = stage.stl.forward(&input, mask)?;
            let mut zj = stage.transition.forward_channels_last(&h)?;
            if stage.activate {
                zj = leaky_relu(&zj, self.leaky_slope)?;
            }
            tap.emit(
                TapSite::Stage {
                    rdg,
                    block,
                    stage: j + 1,
                    input_width,
                },
                &zj,
            )?;
            if stage.activate {
                features.push(zj);
            } else {
                last = Some(zj);
            }
        }
        let z5 = last.expect("at least one stage");
        let out = ((z5 * self.alpha)? + z)?;
        tap.emit(TapSite::Sdrcb { rdg, block }, &out)?;
        Ok(out)
    }
}

/// Residual dense group: a sequential chain of SDRCBs.
#[derive(Debug, Clone)]
pub struct Rdg {
    pub blocks: Vec<Sdrcb>,
}

impl Rdg {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let blocks = (0..cfg.sdrcb_per_rdg)
            .map(|m| Sdrcb::new(&pb.pp("sdrcb").pp(m), cfg))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, f: &Tensor, mask: Option<&ShiftMask>) -> Result<Tensor> {
        self.forward_tapped(f, mask, &mut TapCtx::none(), 0)
    }

    pub(crate) fn forward_tapped(
        &self,
        f: &Tensor,
        mask: Option<&ShiftMask>,
        tap: &mut TapCtx<'_>,
        rdg: usize,
    ) -> Result<Tensor> {
        let mut x = f.clone();
        for (m, block) in self.blocks.iter().enumerate() {
            x = block.forward_tapped(&x, mask, tap, rdg, m)?;
        }
        tap.emit(TapSite::Rdg(rdg), &x)?;
        Ok(x)
    }
}
