use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{CpcConfig, CpcModel, CpcParams, ParamShape};
use crate::envelope::{read_envelope, write_envelope};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "clrsel-cpc";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    seed: u64,
    config: CpcConfig,
    params: Vec<ParamShape>,
    #[serde(default)]
    meta: Value,
}

/// Write the model; `meta` is stored verbatim in the header.
pub fn save_checkpoint(path: &Path, model: &CpcModel<f32>, meta: Value) -> Result<()> {
    let header = Header {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        seed: model.config().seed,
        config: model.config().clone(),
        params: model.params.shapes(),
        meta,
    };
    write_envelope(path, &header, model.params.blocks())
}

pub fn load_checkpoint(path: &Path) -> Result<(CpcModel<f32>, Value)> {
    let (header, payload): (Header, Vec<f32>) =
        read_envelope(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)?;
    let expected = CpcParams::<f32>::zeros(&header.config).shapes();
    if header.params != expected {
        return Err(Error::Format(format!(
            "{}: declared parameter shapes do not match the stored configuration",
            path.display()
        )));
    }
    let total: usize = expected.iter().map(ParamShape::len).sum();
    if payload.len() != total {
        return Err(Error::Format(format!(
            "{}: expected {total} parameters, found {}",
            path.display(),
            payload.len()
        )));
    }
    let mut params = CpcParams::<f32>::zeros(&header.config);
    let mut offset = 0;
    for block in params.blocks_mut() {
        block.copy_from_slice(&payload[offset..offset + block.len()]);
        offset += block.len();
    }
    Ok((CpcModel::from_params(header.config, params)?, header.meta))
}
