//! Checkpoint envelope: one safetensors file holding every parameter as
//! little-endian `f32`, optional Adam moments, and JSON-encoded model
//! configuration plus run metadata in the header.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{bail, Error, Result};
use crate::model::Network;
use crate::nn::ParameterRecord;

pub const FORMAT_VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param/";
const ADAM_M_PREFIX: &str = "adam_m/";
const ADAM_V_PREFIX: &str = "adam_v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub iteration: u64,
    pub stage_index: usize,
    pub stage_iteration: u64,
    pub stage_id: Option<String>,
    pub seed: u64,
    pub best_val_psnr: Option<f64>,
}

impl CheckpointMeta {
    pub fn fresh(seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            iteration: 0,
            stage_index: 0,
            stage_iteration: 0,
            stage_id: None,
            seed,
            best_val_psnr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: Vec<ParameterRecord>,
    /// First and second Adam moments, keyed like `params`. Empty for
    /// inference-only checkpoints.
    pub adam_m: Vec<ParameterRecord>,
    pub adam_v: Vec<ParameterRecord>,
}

fn to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

impl Checkpoint {
    pub fn from_network(net: &Network, meta: CheckpointMeta) -> Result<Self> {
        Ok(Self {
            config: net.config().clone(),
            meta,
            params: net.params().records()?,
            adam_m: Vec::new(),
            adam_v: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let groups = [
            (PARAM_PREFIX, &self.params),
            (ADAM_M_PREFIX, &self.adam_m),
            (ADAM_V_PREFIX, &self.adam_v),
        ];
        let mut buffers = Vec::new();
        for (prefix, records) in groups {
            for r in records.iter() {
                if r.values.len() != r.numel() {
                    bail!(Checkpoint, "record {} has inconsistent shape", r.name);
                }
                buffers.push((format!("{prefix}{}", r.name), r.shape.clone(), to_bytes(&r.values)));
            }
        }
        let views = buffers
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut header = HashMap::new();
        header.insert("format_version".to_string(), self.meta.format_version.to_string());
        header.insert("config".to_string(), serde_json::to_string(&self.config)?);
        header.insert("meta".to_string(), serde_json::to_string(&self.meta)?);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        safetensors::serialize_to_file(views, Some(header), path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
        let (_, metadata) = SafeTensors::read_metadata(&bytes).map_err(bad)?;
        let header = metadata
            .metadata()
            .clone()
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing header metadata", path.display())))?;
        let field = |key: &str| {
            header
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{key}`", path.display())))
        };
        let version: u32 = field("format_version")?
            .parse()
            .map_err(|_| Error::Checkpoint("unparseable format_version".into()))?;
        if version != FORMAT_VERSION {
            bail!(
                Checkpoint,
                "{}: unsupported format version {version} (this build reads {FORMAT_VERSION})",
                path.display()
            );
        }
        let config: ModelConfig = serde_json::from_str(&field("config")?)?;
        let meta: CheckpointMeta = serde_json::from_str(&field("meta")?)?;
        if meta.format_version != version {
            bail!(Checkpoint, "format version disagrees between header fields");
        }
        let st = SafeTensors::deserialize(&bytes).map_err(bad)?;
        let mut ck = Self {
            config,
            meta,
            params: Vec::new(),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
        };
        let mut tensors = st.tensors();
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        for (name, view) in tensors {
            if view.dtype() != Dtype::F32 {
                bail!(Checkpoint, "tensor {name} is {:?}, expected F32", view.dtype());
            }
            let (target, rest) = if let Some(rest) = name.strip_prefix(PARAM_PREFIX) {
                (&mut ck.params, rest)
            } else if let Some(rest) = name.strip_prefix(ADAM_M_PREFIX) {
                (&mut ck.adam_m, rest)
            } else if let Some(rest) = name.strip_prefix(ADAM_V_PREFIX) {
                (&mut ck.adam_v, rest)
            } else {
                bail!(Checkpoint, "unexpected tensor {name}");
            };
            target.push(ParameterRecord {
                name: rest.to_string(),
                shape: view.shape().to_vec(),
                values: from_bytes(view.data()),
            });
        }
        Ok(ck)
    }

    /// Rebuilds the network described by the checkpoint and loads its weights.
    pub fn to_network(&self, dtype: DType, device: &Device) -> Result<Network> {
        let config = ModelConfig {
            identity_init: false,
            ..self.config.clone()
        };
        let net = Network::build(&config, self.meta.seed, dtype, device)?;
        net.params().load_records(&self.params)?;
        Ok(net)
    }
}
