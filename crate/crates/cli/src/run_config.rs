//! The single structured file that drives a run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use drct::data::{
    synthetic_corpus, AugmentationSpec, DatasetManifest, ImagePair, PatchSpec, Split,
};
use drct::train::{AdamConfig, LossKind, StageId, StagePlan, StageSpec, BASE_LR, DEFAULT_MILESTONES};
use drct::ModelConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum CorpusConfig {
    /// `<root>/HR/*.png` with optional `<root>/LR_bicubic/X{s}/` files.
    Folder { root: PathBuf },
    /// Procedurally generated square images.
    Synthetic { count: usize, size: usize, seed: u64 },
}

impl CorpusConfig {
    pub fn load(&self, scale: usize, split: Split) -> Result<Vec<ImagePair>> {
        match self {
            CorpusConfig::Folder { root } => {
                let manifest = DatasetManifest::scan(root, scale, split)
                    .with_context(|| format!("scanning {}", root.display()))?;
                let pairs = manifest
                    .entries
                    .iter()
                    .map(ImagePair::load)
                    .collect::<drct::Result<Vec<_>>>()?;
                if pairs.is_empty() {
                    bail!("{}: no HR images found", root.display());
                }
                Ok(pairs)
            }
            CorpusConfig::Synthetic { count, size, seed } => {
                Ok(synthetic_corpus(*count, *size, scale, *seed)?)
            }
        }
    }

    fn validate(&self, key: &str) -> Result<()> {
        if let CorpusConfig::Synthetic { count, size, .. } = self {
            if *count == 0 || *size == 0 {
                bail!("{key}: count and size must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training corpora referenced by name from `stages[].corpus`.
    pub corpora: BTreeMap<String, CorpusConfig>,
    pub val: CorpusConfig,
    /// Benchmark roots used by `eval` when no `--dataset` is given.
    #[serde(default)]
    pub test: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEntry {
    pub id: StageId,
    pub corpus: String,
    pub loss: LossKind,
    pub total_iters: u64,
    /// Falls back to the top-level `milestones`.
    pub lr_milestones: Option<Vec<f64>>,
    /// Falls back to the top-level `base_lr`.
    pub base_lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub rotations: Vec<u16>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let d = AugmentationSpec::default();
        Self {
            hflip: d.hflip,
            rotations: d.rotations,
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}
fn default_base_lr() -> f64 {
    BASE_LR
}
fn default_milestones() -> Vec<f64> {
    DEFAULT_MILESTONES.to_vec()
}
fn default_batch() -> usize {
    4
}
fn default_patch() -> usize {
    64
}
fn default_log_every() -> u64 {
    10
}
fn default_val_every() -> u64 {
    100
}
fn default_checkpoint_every() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_milestones")]
    pub milestones: Vec<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// HR patch edge in pixels.
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default = "default_val_every")]
    pub val_every: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stages: Vec<StageEntry>,
}

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scale: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(scale) = overrides.scale {
            cfg.model.scale = scale;
        }
        if let Some(out) = &overrides.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("model")?;
        if self.batch_size == 0 {
            bail!("batch_size must be positive");
        }
        if self.patch == 0 || !self.patch.is_multiple_of(self.model.scale) {
            bail!(
                "patch: {} must be a positive multiple of model.scale = {}",
                self.patch,
                self.model.scale
            );
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                bail!("grad_clip must be positive");
            }
        }
        self.augmentation().validate().context("augment")?;
        for (name, corpus) in &self.data.corpora {
            corpus.validate(&format!("data.corpora.{name}"))?;
        }
        self.data.val.validate("data.val")?;
        let plan = self.plan()?;
        for (i, s) in plan.stages.iter().enumerate() {
            if !self.data.corpora.contains_key(&s.corpus) {
                bail!("stages[{i}].corpus: `{}` is not defined under data.corpora", s.corpus);
            }
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<StagePlan> {
        let stages = self
            .stages
            .iter()
            .map(|e| StageSpec {
                id: e.id,
                corpus: e.corpus.clone(),
                loss: e.loss,
                total_iters: e.total_iters,
                lr_milestones: e.lr_milestones.clone().unwrap_or_else(|| self.milestones.clone()),
                base_lr: e.base_lr.unwrap_or(self.base_lr),
            })
            .collect();
        Ok(StagePlan::new(stages)?)
    }

    pub fn augmentation(&self) -> AugmentationSpec {
        AugmentationSpec {
            hflip: self.augment.hflip,
            rotations: self.augment.rotations.clone(),
            seed: self.seed,
        }
    }

    pub fn patch_spec(&self) -> Result<PatchSpec> {
        Ok(PatchSpec::new(self.patch, self.model.scale)?)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            grad_clip: self.grad_clip,
            ..AdamConfig::default()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
