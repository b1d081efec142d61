//! Model checkpoints: `TFM1` magic, a little-endian `u32` header length, a
//! JSON header describing the architecture, then the optimized parameters
//! followed by the EMA parameters, both as little-endian `f32`.
//!
//! Parameters live in memory as `f64` and are rounded to `f32` once on
//! save; loading a checkpoint and saving it again reproduces the file
//! byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::Modality;
use crate::io::write_bytes_atomic;

use super::model::{ModelConfig, VelocityModel};
use super::FlowError;

const MAGIC: &[u8; 4] = b"TFM1";
const ARCHITECTURE: &str = "conv3x3x3-relu-3layer";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    architecture: String,
    data_channels: usize,
    hidden: usize,
    tau_frequencies: usize,
    modality_embed: usize,
    modalities: usize,
    init_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    train_seed: Option<u64>,
    param_count: usize,
}

/// A loaded checkpoint: the optimized model and its EMA companion.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: VelocityModel,
    pub ema_model: VelocityModel,
    pub train_seed: Option<u64>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &VelocityModel,
    ema_model: &VelocityModel,
    train_seed: Option<u64>,
) -> Result<(), FlowError> {
    if model.cfg() != ema_model.cfg() {
        return Err(FlowError::Checkpoint("model and EMA configurations differ".into()));
    }
    let cfg = model.cfg();
    let header = Header {
        schema_version: 1,
        architecture: ARCHITECTURE.into(),
        data_channels: cfg.data_channels,
        hidden: cfg.hidden,
        tau_frequencies: cfg.tau_frequencies,
        modality_embed: cfg.modality_embed,
        modalities: Modality::ALL.len(),
        init_seed: cfg.init_seed,
        train_seed,
        param_count: model.n_params(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| FlowError::Checkpoint(format!("header encode: {e}")))?;

    let mut bytes = Vec::with_capacity(8 + header_json.len() + 8 * model.n_params());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for &p in model.params() {
        bytes.extend_from_slice(&(p as f32).to_le_bytes());
    }
    for &p in ema_model.params() {
        bytes.extend_from_slice(&(p as f32).to_le_bytes());
    }
    write_bytes_atomic(path, &bytes).map_err(|e| FlowError::Checkpoint(format!("write {}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, FlowError> {
    let bytes = std::fs::read(path)?;
    let fail = |msg: String| FlowError::Checkpoint(format!("{}: {msg}", path.display()));

    if bytes.len() < 8 {
        return Err(fail("file shorter than magic + header length".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("bad magic, not a model checkpoint".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(fail("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| fail(format!("header decode: {e}")))?;
    if header.schema_version != 1 {
        return Err(fail(format!("unsupported schema_version {}", header.schema_version)));
    }
    if header.architecture != ARCHITECTURE {
        return Err(fail(format!("unsupported architecture {:?}", header.architecture)));
    }
    if header.modalities != Modality::ALL.len() {
        return Err(fail(format!(
            "checkpoint built for {} modalities, this build has {}",
            header.modalities,
            Modality::ALL.len()
        )));
    }

    let cfg = ModelConfig {
        data_channels: header.data_channels,
        hidden: header.hidden,
        tau_frequencies: header.tau_frequencies,
        modality_embed: header.modality_embed,
        init_seed: header.init_seed,
    };
    let payload = &bytes[8 + header_len..];
    let expect = 2 * 4 * header.param_count;
    if payload.len() != expect {
        return Err(fail(format!("parameter payload is {} bytes, expected {expect}", payload.len())));
    }

    let read_block = |offset: usize| -> Vec<f64> {
        (0..header.param_count)
            .map(|i| {
                let at = offset + 4 * i;
                f32::from_le_bytes(payload[at..at + 4].try_into().unwrap()) as f64
            })
            .collect()
    };
    let model = VelocityModel::with_params(cfg, read_block(0))
        .map_err(|e| fail(format!("parameter count does not fit architecture: {e}")))?;
    let ema_model = VelocityModel::with_params(cfg, read_block(4 * header.param_count))?;
    Ok(Checkpoint { model, ema_model, train_seed: header.train_seed })
}
