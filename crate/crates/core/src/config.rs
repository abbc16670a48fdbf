//! Architectural hyperparameters of the network.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Number of dense stages inside one SDRCB. Not configurable.
pub const DENSE_STAGES: usize = 5;

/// Per-channel RGB mean of the DF2K training corpus, subtracted before the
/// shallow convolution when `normalize_mean` is enabled.
pub const DF2K_RGB_MEAN: [f32; 3] = [0.4488, 0.4371, 0.4040];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKernel {
    /// 1x1 convolution fusing the concatenated features.
    #[default]
    Conv1x1,
    /// 3x3 convolution, as used by RRDB.
    Conv3x3,
}

impl TransitionKernel {
    pub fn size(self) -> usize {
        match self {
            TransitionKernel::Conv1x1 => 1,
            TransitionKernel::Conv3x3 => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub scale: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_rdg: usize,
    pub sdrcb_per_rdg: usize,
    pub dense_stages: usize,
    /// Growth channels added by each of the first four dense stages.
    /// `None` (or an omitted key) means `embed_dim / 6`.
    #[serde(default)]
    pub growth: Option<usize>,
    pub num_heads: usize,
    pub window_size: usize,
    pub mlp_ratio: f64,
    pub alpha: f64,
    pub leaky_slope: f64,
    pub img_range: f64,
    pub normalize_mean: bool,
    pub transition_kernel: TransitionKernel,
    /// Zero every SDRCB final transition at build time, turning each RDG
    /// into the identity map.
    pub identity_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(4)
    }
}

impl ModelConfig {
    /// Full-size configuration: C=180, six RDGs of six SDRCBs, six heads,
    /// 16x16 windows.
    pub fn full(scale: usize) -> Self {
        Self {
            scale,
            in_channels: 3,
            embed_dim: 180,
            num_rdg: 6,
            sdrcb_per_rdg: 6,
            dense_stages: DENSE_STAGES,
            growth: None,
            num_heads: 6,
            window_size: 16,
            mlp_ratio: 2.0,
            alpha: 0.2,
            leaky_slope: 0.2,
            img_range: 1.0,
            normalize_mean: true,
            transition_kernel: TransitionKernel::Conv1x1,
            identity_init: false,
        }
    }

    /// CPU-sized configuration used by the test suite and the shipped desk preset.
    pub fn desk(scale: usize) -> Self {
        Self {
            embed_dim: 60,
            num_rdg: 2,
            sdrcb_per_rdg: 2,
            growth: Some(12),
            window_size: 8,
            ..Self::full(scale)
        }
    }

    pub fn growth(&self) -> usize {
        self.growth.unwrap_or(self.embed_dim / 6)
    }

    /// Input width of dense stage `j` (1-based): `C + (j - 1) * g`.
    pub fn stage_width(&self, j: usize) -> usize {
        self.embed_dim + (j - 1) * self.growth()
    }

    /// Attention widths of the five dense stages.
    pub fn stage_widths(&self) -> Vec<usize> {
        (1..=self.dense_stages).map(|j| self.stage_width(j)).collect()
    }

    /// Cyclic shift applied by the STL of dense stage `j`: none on odd
    /// stages, half a window on even ones.
    pub fn stage_shift(&self, j: usize) -> usize {
        if j % 2 == 1 {
            0
        } else {
            self.window_size / 2
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2..=4) {
            bail!(Config, "scale must be 2, 3 or 4 (got {})", self.scale);
        }
        if self.in_channels == 0 {
            bail!(Config, "in_channels must be positive");
        }
        if self.embed_dim == 0 || self.num_heads == 0 {
            bail!(Config, "embed_dim and num_heads must be positive");
        }
        if self.num_rdg == 0 || self.sdrcb_per_rdg == 0 {
            bail!(Config, "num_rdg and sdrcb_per_rdg must be positive");
        }
        if self.dense_stages != DENSE_STAGES {
            bail!(
                Config,
                "dense_stages is fixed at {DENSE_STAGES} (got {})",
                self.dense_stages
            );
        }
        if self.growth() == 0 {
            bail!(Config, "growth channels must be positive");
        }
        if self.window_size < 2 || !self.window_size.is_multiple_of(2) {
            bail!(
                Config,
                "window_size must be an even number >= 2 (got {})",
                self.window_size
            );
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            bail!(Config, "alpha must lie in (0, 1] (got {})", self.alpha);
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 {
            bail!(Config, "mlp_ratio must be positive");
        }
        if self.img_range.is_nan() || self.img_range <= 0.0 {
            bail!(Config, "img_range must be positive");
        }
        if self.normalize_mean && self.in_channels != DF2K_RGB_MEAN.len() {
            bail!(
                Config,
                "normalize_mean requires in_channels = 3 (got {})",
                self.in_channels
            );
        }
        for j in 1..=self.dense_stages {
            let width = self.stage_width(j);
            if !width.is_multiple_of(self.num_heads) {
                bail!(
                    Config,
                    "attention width C + {}*g = {width} is not divisible by num_heads = {}",
                    j - 1,
                    self.num_heads
                );
            }
        }
        Ok(())
    }

    /// Hidden width of the STL MLP at attention width `dim`.
    pub fn mlp_hidden(&self, dim: usize) -> usize {
        (dim as f64 * self.mlp_ratio).round() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn omitted_growth_follows_width() {
        let cfg: ModelConfig = serde_json::from_str(r#"{"embed_dim": 180, "num_heads": 6}"#).unwrap();
        assert_eq!(cfg.growth, None);
        assert_eq!(cfg.growth(), 30);
        let back: ModelConfig = serde_json::from_str(&serde_json::to_string(&ModelConfig::full(4)).unwrap()).unwrap();
        assert_eq!(back, ModelConfig::full(4));
    }

    #[test]
    fn presets_validate() {
        for scale in 2..=4 {
            ModelConfig::desk(scale).validate().unwrap();
            ModelConfig::full(scale).validate().unwrap();
        }
    }

    #[test]
    fn desk_widths_divisible_by_heads() {
        let cfg = ModelConfig::desk(4);
        assert_eq!(cfg.stage_widths(), vec![60, 72, 84, 96, 108]);
        assert!(cfg.stage_widths().iter().all(|w| w % 6 == 0));
    }

    #[test]
    fn default_growth_is_sixth_of_width() {
        assert_eq!(ModelConfig::full(4).growth(), 30);
        assert_eq!(ModelConfig::full(4).stage_widths(), vec![180, 210, 240, 270, 300]);
    }

    #[test]
    fn seven_heads_rejected() {
        let cfg = ModelConfig {
            num_heads: 7,
            ..ModelConfig::desk(4)
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("60") && err.contains("num_heads = 7"), "{err}");
    }

    #[test]
    fn bad_scale_and_alpha_rejected() {
        assert!(ModelConfig::desk(5).validate().is_err());
        assert!(ModelConfig::desk(1).validate().is_err());
        let cfg = ModelConfig {
            alpha: 0.0,
            ..ModelConfig::desk(2)
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            dense_stages: 4,
            ..ModelConfig::desk(2)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shift_schedule_alternates() {
        let cfg = ModelConfig::desk(2);
        let shifts: Vec<_> = (1..=5).map(|j| cfg.stage_shift(j)).collect();
        assert_eq!(shifts, vec![0, 4, 0, 4, 0]);
    }
}
