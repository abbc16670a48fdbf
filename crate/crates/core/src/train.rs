//! Progressive training: stage plan, losses, Adam, multistep schedule and
//! the checkpointed training loop.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::data::{ImagePair, PatchSampler};
use crate::error::{bail, Error, Result};
use crate::eval::{crop_pixels_for_scale, psnr};
use crate::image::ValueRange;
use crate::model::Network;
use crate::nn::ParameterRecord;

pub const BASE_LR: f64 = 2e-4;
pub const DEFAULT_MILESTONES: [f64; 5] = [
    300.0 / 800.0,
    500.0 / 800.0,
    650.0 / 800.0,
    700.0 / 800.0,
    750.0 / 800.0,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    Pretrain,
    L1Finetune,
    L2Polish,
}

impl StageId {
    pub fn as_str(self) -> &'static str {
        match self {
            StageId::Pretrain => "pretrain",
            StageId::L1Finetune => "l1_finetune",
            StageId::L2Polish => "l2_polish",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub id: StageId,
    /// Key into the corpora handed to the training loop.
    pub corpus: String,
    pub loss: LossKind,
    pub total_iters: u64,
    #[serde(default = "default_milestones")]
    pub lr_milestones: Vec<f64>,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
}

fn default_milestones() -> Vec<f64> {
    DEFAULT_MILESTONES.to_vec()
}

fn default_base_lr() -> f64 {
    BASE_LR
}

impl StageSpec {
    pub fn new(id: StageId, corpus: impl Into<String>, loss: LossKind, total_iters: u64) -> Self {
        Self {
            id,
            corpus: corpus.into(),
            loss,
            total_iters,
            lr_milestones: default_milestones(),
            base_lr: BASE_LR,
        }
    }

    pub fn lr(&self, stage_iteration: u64) -> f64 {
        lr_at(stage_iteration, self.base_lr, self.total_iters, &self.lr_milestones)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
}

impl StagePlan {
    pub fn new(stages: Vec<StageSpec>) -> Result<Self> {
        let plan = Self { stages };
        plan.validate()?;
        Ok(plan)
    }

    /// Standard three-phase plan with the given per-stage lengths.
    pub fn progressive(corpus_pretrain: &str, corpus_main: &str, iters: [u64; 3]) -> Result<Self> {
        Self::new(vec![
            StageSpec::new(StageId::Pretrain, corpus_pretrain, LossKind::L1, iters[0]),
            StageSpec::new(StageId::L1Finetune, corpus_main, LossKind::L1, iters[1]),
            StageSpec::new(StageId::L2Polish, corpus_main, LossKind::L2, iters[2]),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            bail!(Config, "stages: plan has no stages");
        }
        let last = self.stages.len() - 1;
        for (i, s) in self.stages.iter().enumerate() {
            if s.total_iters == 0 {
                bail!(Config, "stages[{i}].total_iters must be positive");
            }
            if !(s.base_lr.is_finite() && s.base_lr > 0.0) {
                bail!(Config, "stages[{i}].base_lr must be positive, got {}", s.base_lr);
            }
            if s.lr_milestones.iter().any(|m| !(*m > 0.0 && *m < 1.0)) {
                bail!(Config, "stages[{i}].lr_milestones must lie in (0, 1)");
            }
            if s.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
                bail!(Config, "stages[{i}].lr_milestones must be strictly increasing");
            }
            if s.loss == LossKind::L2 && i != last {
                bail!(Config, "stages[{i}].loss: L2 is only allowed in the final stage");
            }
            if s.corpus.is_empty() {
                bail!(Config, "stages[{i}].corpus is empty");
            }
        }
        Ok(())
    }
}

/// Mean absolute deviation over every element.
pub fn l1_loss(sr: &Tensor, hr: &Tensor) -> Result<Tensor> {
    check_same(sr, hr)?;
    Ok((sr - hr)?.abs()?.mean_all()?)
}

/// Mean squared deviation over every element.
pub fn l2_loss(sr: &Tensor, hr: &Tensor) -> Result<Tensor> {
    check_same(sr, hr)?;
    Ok((sr - hr)?.sqr()?.mean_all()?)
}

pub fn loss(kind: LossKind, sr: &Tensor, hr: &Tensor) -> Result<Tensor> {
    match kind {
        LossKind::L1 => l1_loss(sr, hr),
        LossKind::L2 => l2_loss(sr, hr),
    }
}

fn check_same(sr: &Tensor, hr: &Tensor) -> Result<()> {
    if sr.dims() != hr.dims() {
        bail!(Shape, "loss inputs differ in shape: {:?} vs {:?}", sr.dims(), hr.dims());
    }
    Ok(())
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `base_lr` halved once per milestone `m` with `iter >= round(m * total)`.
pub fn lr_at(iter: u64, base_lr: f64, total: u64, milestones: &[f64]) -> f64 {
    let passed = milestones
        .iter()
        .filter(|&&m| iter >= (m * total as f64).round() as u64)
        .count();
    base_lr * 0.5f64.powi(passed as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` leaves gradients untouched.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

/// Optimiser and schedule position. Minibatches are a pure function of
/// `(seed, iteration)`, so no separate RNG state is kept.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub iteration: u64,
    pub stage_index: usize,
    pub stage_iteration: u64,
    pub seed: u64,
    pub best_val_psnr: Option<f64>,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl TrainState {
    pub fn new(net: &Network, seed: u64) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (name, var) in net.params().iter() {
            let z = var.as_tensor().zeros_like()?;
            moments.insert(name.to_string(), (z.clone(), z));
        }
        Ok(Self {
            iteration: 0,
            stage_index: 0,
            stage_iteration: 0,
            seed,
            best_val_psnr: None,
            moments,
        })
    }

    /// `(m, v)` for one parameter.
    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        self.moments.get(name).map(|(m, v)| (m, v))
    }

    pub fn moments_are_zero(&self) -> Result<bool> {
        for (m, v) in self.moments.values() {
            for t in [m, v] {
                if scalar(&t.abs()?.sum_all()?)? != 0.0 {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    fn reset_moments(&mut self) -> Result<()> {
        for (m, v) in self.moments.values_mut() {
            *m = m.zeros_like()?;
            *v = v.zeros_like()?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, net: &Network, plan: &StagePlan) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            iteration: self.iteration,
            stage_index: self.stage_index,
            stage_iteration: self.stage_iteration,
            stage_id: plan
                .stages
                .get(self.stage_index)
                .map(|s| s.id.as_str().to_string()),
            seed: self.seed,
            best_val_psnr: self.best_val_psnr,
        };
        let mut ck = Checkpoint::from_network(net, meta)?;
        for (name, (m, v)) in &self.moments {
            ck.adam_m.push(record(name, m)?);
            ck.adam_v.push(record(name, v)?);
        }
        Ok(ck)
    }

    /// Restores parameters into `net` and rebuilds the optimiser state.
    pub fn from_checkpoint(ck: &Checkpoint, net: &Network) -> Result<Self> {
        net.params().load_records(&ck.params)?;
        let mut state = Self::new(net, ck.meta.seed)?;
        state.iteration = ck.meta.iteration;
        state.stage_index = ck.meta.stage_index;
        state.stage_iteration = ck.meta.stage_iteration;
        state.best_val_psnr = ck.meta.best_val_psnr;
        if ck.adam_m.is_empty() && ck.adam_v.is_empty() {
            return Ok(state);
        }
        let (dtype, device) = (net.dtype(), net.device().clone());
        let by_name = |records: &[ParameterRecord]| -> HashMap<String, ParameterRecord> {
            records.iter().map(|r| (r.name.clone(), r.clone())).collect()
        };
        let (ms, vs) = (by_name(&ck.adam_m), by_name(&ck.adam_v));
        if ms.len() != state.moments.len() || vs.len() != state.moments.len() {
            bail!(
                Checkpoint,
                "optimiser moments cover {}/{} tensors, network has {}",
                ms.len(),
                vs.len(),
                state.moments.len()
            );
        }
        for (name, slot) in state.moments.iter_mut() {
            let load = |src: &HashMap<String, ParameterRecord>| -> Result<Tensor> {
                let r = src
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimiser moment {name}")))?;
                if r.shape != slot.0.dims() {
                    bail!(Checkpoint, "moment {name} has shape {:?}, expected {:?}", r.shape, slot.0.dims());
                }
                Ok(Tensor::from_vec(r.values.clone(), r.shape.as_slice(), &device)?.to_dtype(dtype)?)
            };
            *slot = (load(&ms)?, load(&vs)?);
        }
        Ok(state)
    }
}

fn record(name: &str, t: &Tensor) -> Result<ParameterRecord> {
    Ok(ParameterRecord {
        name: name.to_string(),
        shape: t.dims().to_vec(),
        values: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
    })
}

/// One Adam update on `(lr_batch -> hr_batch)` using the learning rate of
/// the current stage position. Returns the loss measured before the update.
pub fn train_step(
    state: &mut TrainState,
    net: &Network,
    lr_batch: &Tensor,
    hr_batch: &Tensor,
    stage: &StageSpec,
    adam: &AdamConfig,
) -> Result<f64> {
    let sr = net.forward(lr_batch)?;
    let loss_t = loss(stage.loss, &sr, hr_batch)?;
    let value = scalar(&loss_t)?;
    if !value.is_finite() {
        return Err(Error::Diverged {
            iteration: state.iteration,
            loss: value,
        });
    }
    let grads = loss_t.backward()?;
    let mut updates = Vec::with_capacity(state.moments.len());
    let mut sq_norm = 0.0;
    for (name, var) in net.params().iter() {
        let g = match grads.get(var.as_tensor()) {
            Some(g) => g.detach(),
            None => var.as_tensor().zeros_like()?,
        };
        if adam.grad_clip.is_some() {
            sq_norm += scalar(&g.sqr()?.sum_all()?)?;
        }
        updates.push((name.to_string(), var, g));
    }
    let clip = match adam.grad_clip {
        Some(c) if sq_norm.sqrt() > c => c / sq_norm.sqrt(),
        _ => 1.0,
    };
    let rate = stage.lr(state.stage_iteration);
    let t = (state.stage_iteration + 1) as i32;
    let bc1 = 1.0 - adam.beta1.powi(t);
    let bc2 = 1.0 - adam.beta2.powi(t);
    for (name, var, g) in updates {
        let g = if clip != 1.0 { (g * clip)? } else { g };
        let (m, v) = state
            .moments
            .get_mut(&name)
            .ok_or_else(|| Error::Config(format!("no optimiser slot for {name}")))?;
        *m = ((&*m * adam.beta1)? + (&g * (1.0 - adam.beta1))?)?.detach();
        *v = ((&*v * adam.beta2)? + (g.sqr()? * (1.0 - adam.beta2))?)?.detach();
        let denom = ((&*v / bc2)?.sqrt()? + adam.eps)?;
        let step = ((&*m / bc1)? / denom)?;
        var.set(&(var.as_tensor().detach() - (step * rate)?)?)?;
    }
    state.iteration += 1;
    state.stage_iteration += 1;
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageAdvance {
    Next(StageId),
    Complete,
}

/// Moves to the next stage: fresh moments, schedule restarted. Parameters
/// are not touched.
pub fn advance_stage(plan: &StagePlan, state: &mut TrainState) -> Result<StageAdvance> {
    if state.stage_index + 1 >= plan.stages.len() {
        state.stage_index = plan.stages.len();
        state.stage_iteration = 0;
        return Ok(StageAdvance::Complete);
    }
    state.stage_index += 1;
    state.stage_iteration = 0;
    state.reset_moments()?;
    Ok(StageAdvance::Next(plan.stages[state.stage_index].id))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub l2: f64,
    pub psnr: f64,
}

/// Mean unquantised L2 and mean border-cropped PSNR over `pairs`.
pub fn validate(net: &Network, pairs: &[ImagePair]) -> Result<Validation> {
    if pairs.is_empty() {
        bail!(Argument, "validation set is empty");
    }
    let crop = crop_pixels_for_scale(net.config().scale);
    let (mut l2, mut db) = (0.0, 0.0);
    for p in pairs {
        let sr = net.upscale(&p.lr)?;
        let hr = p.hr.to_range(ValueRange::Unit);
        l2 += sr
            .data()
            .iter()
            .zip(hr.data())
            .map(|(a, b)| ((*a - *b) as f64).powi(2))
            .sum::<f64>()
            / sr.data().len() as f64;
        db += psnr(&sr, &hr, crop.min((hr.height().min(hr.width()) - 1) / 2))?;
    }
    let n = pairs.len() as f64;
    Ok(Validation {
        l2: l2 / n,
        psnr: db / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub stage: StageId,
    pub stage_iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub val_psnr: Option<f64>,
    pub val_l2: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LoopOptions {
    pub batch_size: usize,
    pub log_every: u64,
    /// Validation interval in iterations; `0` validates only at stage ends.
    pub val_every: u64,
    /// Periodic `last.safetensors` interval; `0` disables it.
    pub checkpoint_every: u64,
    pub out_dir: Option<PathBuf>,
    pub adam: AdamConfig,
}

impl Default for LoopOptions {
    fn default() -> Self {
        Self {
            batch_size: 1,
            log_every: 1,
            val_every: 0,
            checkpoint_every: 0,
            out_dir: None,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub id: StageId,
    pub entry: Validation,
    pub exit: Validation,
    pub final_loss: f64,
}

/// Runs the plan from `state` onward. Stops at the end of the plan.
pub fn run_plan(
    net: &Network,
    plan: &StagePlan,
    corpora: &HashMap<String, PatchSampler>,
    val: &[ImagePair],
    state: &mut TrainState,
    opts: &LoopOptions,
    sink: &mut dyn FnMut(&LogRecord),
) -> Result<Vec<StageSummary>> {
    plan.validate()?;
    for s in &plan.stages {
        if !corpora.contains_key(&s.corpus) {
            bail!(Config, "stages: corpus `{}` is not defined", s.corpus);
        }
    }
    let mut summaries = Vec::new();
    while state.stage_index < plan.stages.len() {
        let stage = &plan.stages[state.stage_index];
        let sampler = &corpora[&stage.corpus];
        let entry = validate(net, val)?;
        let mut final_loss = f64::NAN;
        while state.stage_iteration < stage.total_iters {
            let (hr, lr) = sampler.batch(state.iteration, opts.batch_size)?;
            let rate = stage.lr(state.stage_iteration);
            let lr_t = lr.to_tensor(net.dtype(), net.device())?;
            let hr_t = hr.to_tensor(net.dtype(), net.device())?;
            final_loss = train_step(state, net, &lr_t, &hr_t, stage, &opts.adam)?;
            let mut rec = LogRecord {
                iteration: state.iteration,
                stage: stage.id,
                stage_iteration: state.stage_iteration,
                lr: rate,
                loss: final_loss,
                val_psnr: None,
                val_l2: None,
            };
            if opts.val_every > 0 && state.stage_iteration.is_multiple_of(opts.val_every) {
                let v = validate(net, val)?;
                rec.val_psnr = Some(v.psnr);
                rec.val_l2 = Some(v.l2);
                if state.best_val_psnr.is_none_or(|b| v.psnr > b) {
                    state.best_val_psnr = Some(v.psnr);
                    save(state, net, plan, opts, "best.safetensors")?;
                }
            }
            if rec.val_psnr.is_some() || (opts.log_every > 0 && state.iteration.is_multiple_of(opts.log_every)) {
                sink(&rec);
            }
            if opts.checkpoint_every > 0 && state.iteration.is_multiple_of(opts.checkpoint_every) {
                save(state, net, plan, opts, "last.safetensors")?;
            }
        }
        let exit = validate(net, val)?;
        summaries.push(StageSummary {
            id: stage.id,
            entry,
            exit,
            final_loss,
        });
        log::info!(
            "stage {} finished: val PSNR {:.3} -> {:.3} dB",
            stage.id.as_str(),
            entry.psnr,
            exit.psnr
        );
        advance_stage(plan, state)?;
        save(state, net, plan, opts, "last.safetensors")?;
    }
    Ok(summaries)
}

fn save(state: &TrainState, net: &Network, plan: &StagePlan, opts: &LoopOptions, file: &str) -> Result<()> {
    if let Some(dir) = &opts.out_dir {
        state.to_checkpoint(net, plan)?.save(dir.join(file))?;
    }
    Ok(())
}
