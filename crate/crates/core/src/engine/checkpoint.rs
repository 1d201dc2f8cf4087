//! Binary checkpoints: `MHGN`, `u32` version, `u64` header length, JSON
//! header, then little-endian `f64` blocks for parameters and the two Adam
//! moment sets, all in declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::schedule::ScheduleState;
use crate::error::{Error, Result};
use crate::model::{Model, ParamBlock, Params};

pub const MAGIC: &[u8; 4] = b"MHGN";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    blocks: Vec<ParamBlock>,
    adam_step: u64,
    schedule: ScheduleState,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: Params,
    pub adam: AdamState,
    pub schedule: ScheduleState,
}

pub fn encode_checkpoint(model: &Model, params: &Params, adam: &AdamState, schedule: &ScheduleState) -> Result<Vec<u8>> {
    let header = Header {
        config_hash: model.config_hash(),
        blocks: params.blocks.clone(),
        adam_step: adam.step,
        schedule: *schedule,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 3 * 8 * params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for set in [params, &adam.m, &adam.v] {
        for b in &set.blocks {
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(model: &Model, bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let current = model.config_hash();
    if header.config_hash != current {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: checkpoint {} vs current {current}",
            header.config_hash
        )));
    }
    let template = model.zero_params();
    let layout_ok = template.blocks.len() == header.blocks.len()
        && template
            .blocks
            .iter()
            .zip(&header.blocks)
            .all(|(a, b)| a.name == b.name && a.shape == b.shape);
    if !layout_ok {
        return Err(bad("parameter layout differs from the model"));
    }
    let n = template.num_values();
    let data = &bytes[16 + hlen..];
    if data.len() != 3 * 8 * n {
        return Err(Error::Checkpoint(format!(
            "expected {} payload bytes, found {}",
            3 * 8 * n,
            data.len()
        )));
    }
    let mut values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut fill = || {
        let mut p = template.clone();
        for b in &mut p.blocks {
            for v in &mut b.data {
                *v = values.next().unwrap();
            }
        }
        p
    };
    let params = fill();
    let m = fill();
    let v = fill();
    Ok(Checkpoint {
        params,
        adam: AdamState {
            m,
            v,
            step: header.adam_step,
        },
        schedule: header.schedule,
    })
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model,
    params: &Params,
    adam: &AdamState,
    schedule: &ScheduleState,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model, params, adam, schedule)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(model, &bytes)
}
