//! Single-file network checkpoints.
//!
//! Layout: one line of canonical JSON (sorted keys, compact) holding the
//! config, a `\n`, every parameter block in declaration order as little-endian
//! `f64`, and a trailing little-endian CRC-32 of all preceding bytes.

use std::path::Path;

use serde_json::json;

use super::network::{MoEConfig, MoENetwork, Params};
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

pub fn encode(net: &MoENetwork) -> Result<Vec<u8>> {
    let header = json!({
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "parameter_count": net.params.len(),
        "config": serde_json::to_value(&net.config)?,
    });
    // serde_json::Value keeps object keys sorted
    let mut bytes = serde_json::to_string(&header)?.into_bytes();
    bytes.push(b'\n');
    for (_, block) in net.params.blocks() {
        for v in block {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    Ok(bytes)
}

pub fn decode(bytes: &[u8]) -> Result<MoENetwork> {
    if bytes.len() < 5 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let nl = body
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
    let header: serde_json::Value = serde_json::from_slice(&body[..nl])?;
    let config: MoEConfig = serde_json::from_value(
        header
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("header has no config".into()))?,
    )?;
    config.validate()?;
    let payload = &body[nl + 1..];
    if payload.len() % 8 != 0 {
        return Err(Error::Checkpoint("payload is not a whole number of f64".into()));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut params = Params::zeros(&config);
    params.load_flat(&flat)?;
    MoENetwork::from_params(config, params)
}

pub fn save(net: &MoENetwork, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<MoENetwork> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
