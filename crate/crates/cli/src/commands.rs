use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use drct::checkpoint::{Checkpoint, CheckpointMeta};
use drct::data::{DatasetManifest, PatchSampler, Split};
use drct::diagnostics::{export_trace, g_index, load_trace, record_trace, render_chart, TapLevel};
use drct::eval::{run_benchmark, self_ensemble, Upscaler};
use drct::model::parameter_count;
use drct::train::{run_plan, LogRecord, LoopOptions, TrainState};
use drct::{DType, Device, ImageTensor, ModelConfig, Network};
use serde::Serialize;

use crate::run_config::{Overrides, RunConfig};

/// Parameter count reported for the published full-size model.
pub const PUBLISHED_PARAMETERS: f64 = 14.13e6;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_network(checkpoint: &Path) -> Result<(Network, Checkpoint)> {
    let ck = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let net = ck.to_network(DType::F32, &Device::Cpu)?;
    Ok((net, ck))
}

fn check_scale(net: &Network, scale: Option<usize>) -> Result<()> {
    if let Some(s) = scale {
        if s != net.config().scale {
            bail!("--scale {s} does not match the checkpoint's x{} model", net.config().scale);
        }
    }
    Ok(())
}

pub fn train(config: &Path, overrides: &Overrides, resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config, overrides)?;
    create_dir(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()?)?;
    let plan = cfg.plan()?;
    let scale = cfg.model.scale;

    let mut corpora = HashMap::new();
    for (name, corpus) in &cfg.data.corpora {
        let pairs = corpus
            .load(scale, Split::Train)
            .with_context(|| format!("data.corpora.{name}"))?;
        let sampler = PatchSampler::new(pairs, cfg.patch_spec()?, cfg.augmentation())
            .with_context(|| format!("data.corpora.{name}"))?;
        corpora.insert(name.clone(), sampler);
    }
    let val = cfg.data.val.load(scale, Split::Val).context("data.val")?;

    let (net, mut state) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            if ck.config != cfg.model {
                bail!("model section differs from the checkpoint being resumed");
            }
            let net = Network::build(&cfg.model, cfg.seed, DType::F32, &Device::Cpu)?;
            let state = TrainState::from_checkpoint(&ck, &net)?;
            (net, state)
        }
        None => {
            let net = Network::build(&cfg.model, cfg.seed, DType::F32, &Device::Cpu)?;
            let state = TrainState::new(&net, cfg.seed)?;
            (net, state)
        }
    };
    log::info!(
        "training {} parameters over {} stage(s)",
        net.count_parameters(),
        plan.stages.len()
    );

    let log_path = cfg.out_dir.join("log.jsonl");
    let mut log_file = BufWriter::new(
        File::options()
            .create(true)
            .append(true)
            .open(&log_path)
            .with_context(|| format!("opening {}", log_path.display()))?,
    );
    let mut write_err = None;
    let mut sink = |rec: &LogRecord| {
        let line = serde_json::to_string(rec).expect("log records serialise");
        println!("{line}");
        if let Err(e) = writeln!(log_file, "{line}").and_then(|_| log_file.flush()) {
            write_err.get_or_insert(e);
        }
    };
    let opts = LoopOptions {
        batch_size: cfg.batch_size,
        log_every: cfg.log_every,
        val_every: cfg.val_every,
        checkpoint_every: cfg.checkpoint_every,
        out_dir: Some(cfg.out_dir.clone()),
        adam: cfg.adam(),
    };
    let summaries = run_plan(&net, &plan, &corpora, &val, &mut state, &opts, &mut sink)?;
    if let Some(e) = write_err {
        return Err(e).context("writing training log");
    }
    state
        .to_checkpoint(&net, &plan)?
        .save(cfg.out_dir.join("final.safetensors"))?;
    let summary: Vec<_> = summaries
        .iter()
        .map(|s| {
            serde_json::json!({
                "stage": s.id,
                "entry_val_psnr": s.entry.psnr,
                "exit_val_psnr": s.exit.psnr,
                "entry_val_l2": s.entry.l2,
                "exit_val_l2": s.exit.l2,
                "final_loss": s.final_loss,
            })
        })
        .collect();
    write_json(&cfg.out_dir.join("summary.json"), &summary)?;
    Ok(())
}

/// Returns `false` when some benchmark image could not be scored.
pub fn eval(
    checkpoint: &Path,
    datasets: &[PathBuf],
    config: Option<&Path>,
    scale: Option<usize>,
    tta: bool,
    out: &Path,
) -> Result<bool> {
    let (net, _) = load_network(checkpoint)?;
    check_scale(&net, scale)?;
    let mut roots = datasets.to_vec();
    if roots.is_empty() {
        if let Some(cfg) = config {
            roots = RunConfig::load(cfg, &Overrides::default())?.data.test;
        }
    }
    if roots.is_empty() {
        bail!("no dataset given: pass --dataset or set data.test in --config");
    }
    create_dir(out)?;
    let s = net.config().scale;
    let mut complete = true;
    for root in &roots {
        let manifest = DatasetManifest::scan(root, s, Split::Test)
            .with_context(|| format!("scanning {}", root.display()))?;
        let report = run_benchmark(&net, &manifest, s, tta)?;
        let stem = format!("{}_x{s}{}", report.dataset, if tta { "_tta" } else { "" });
        write_json(&out.join(format!("{stem}.json")), &report)?;
        let table = report.to_table("DRCT");
        std::fs::write(out.join(format!("{stem}.txt")), &table)?;
        print!("{table}");
        if !report.is_complete() {
            log::error!("{}: {} image(s) skipped", report.dataset, report.skipped.len());
            complete = false;
        }
    }
    Ok(complete)
}

pub fn infer(
    checkpoint: &Path,
    inputs: &[PathBuf],
    scale: Option<usize>,
    tta: bool,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let (net, _) = load_network(checkpoint)?;
    check_scale(&net, scale)?;
    if inputs.is_empty() {
        bail!("no --input images given");
    }
    create_dir(out)?;
    let s = net.config().scale;
    let mut written = Vec::new();
    for input in inputs {
        let lr = ImageTensor::load_png(input)?;
        let sr = if tta {
            self_ensemble(&net, &lr)?
        } else {
            Upscaler::upscale(&net, &lr)?
        };
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let path = out.join(format!("{stem}_x{s}.png"));
        sr.save_png(&path)?;
        log::info!("{} -> {}", input.display(), path.display());
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Serialize)]
pub struct DiagnoseSummary {
    pub input: String,
    pub tap_level: TapLevel,
    pub taps: usize,
    pub g_index: f64,
    /// Over the shallow feature and the RDG outputs only.
    pub chain_g_index: Option<f64>,
    pub parameter_count: usize,
    pub published_parameter_count: f64,
    pub trace: PathBuf,
    pub chart: PathBuf,
}

pub fn diagnose(
    checkpoint: &Path,
    input: &Path,
    level: TapLevel,
    compare: Option<&Path>,
    out: &Path,
) -> Result<DiagnoseSummary> {
    let (net, _) = load_network(checkpoint)?;
    let lr = ImageTensor::load_png(input)?;
    create_dir(out)?;
    let id = input.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
    let trace = record_trace(&net, &lr, id, level)?;
    let trace_path = out.join("trace.json");
    let (chart, _) = export_trace(&trace, &trace_path)?;
    if let Some(other) = compare {
        let other = load_trace(other)?;
        render_chart(&[trace.clone(), other], &chart)?;
    }
    let chain = trace.chain();
    let summary = DiagnoseSummary {
        input: input.display().to_string(),
        tap_level: level,
        taps: trace.taps.len(),
        g_index: g_index(&trace)?,
        chain_g_index: (level == TapLevel::PerRdg && chain.taps.len() >= 2)
            .then(|| g_index(&chain))
            .transpose()?,
        parameter_count: net.count_parameters(),
        published_parameter_count: PUBLISHED_PARAMETERS,
        trace: trace_path,
        chart,
    };
    write_json(&out.join("diagnose.json"), &summary)?;
    Ok(summary)
}

pub fn init(
    config: Option<&Path>,
    preset: &str,
    overrides: &Overrides,
    identity: bool,
    out: &Path,
) -> Result<()> {
    let (mut model, mut seed) = match config {
        Some(path) => {
            let cfg = RunConfig::load(path, overrides)?;
            (cfg.model, cfg.seed)
        }
        None => {
            let scale = overrides.scale.unwrap_or(4);
            let model = match preset {
                "desk" => ModelConfig::desk(scale),
                "full" => ModelConfig::full(scale),
                other => bail!("unknown preset `{other}` (desk, full)"),
            };
            (model, 0)
        }
    };
    if let Some(s) = overrides.seed {
        seed = s;
    }
    model.identity_init |= identity;
    let net = Network::build(&model, seed, DType::F32, &Device::Cpu)?;
    Checkpoint::from_network(&net, CheckpointMeta::fresh(seed))?.save(out)?;
    log::info!("wrote {} ({} parameters)", out.display(), net.count_parameters());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct InspectSummary {
    pub config: ModelConfig,
    pub parameter_count: usize,
    pub published_parameter_count: f64,
    pub groups: Vec<(String, usize)>,
    pub meta: Option<CheckpointMeta>,
}

pub fn inspect(checkpoint: Option<&Path>, config: Option<&Path>, overrides: &Overrides) -> Result<InspectSummary> {
    let (model, meta, records) = match (checkpoint, config) {
        (Some(path), _) => {
            let ck = Checkpoint::load(path)?;
            let records: Vec<_> = ck.params.iter().map(|r| (r.name.clone(), r.numel())).collect();
            (ck.config, Some(ck.meta), records)
        }
        (None, Some(path)) => (RunConfig::load(path, overrides)?.model, None, Vec::new()),
        (None, None) => bail!("pass --checkpoint or --config"),
    };
    let parameter_count = if records.is_empty() {
        parameter_count(&model)?
    } else {
        records.iter().map(|(_, n)| n).sum()
    };
    let mut groups: Vec<(String, usize)> = Vec::new();
    for (name, n) in &records {
        let top = name.split('.').take(2).collect::<Vec<_>>().join(".");
        match groups.last_mut() {
            Some((g, total)) if *g == top => *total += n,
            _ => groups.push((top, *n)),
        }
    }
    Ok(InspectSummary {
        config: model,
        parameter_count,
        published_parameter_count: PUBLISHED_PARAMETERS,
        groups,
        meta,
    })
}
