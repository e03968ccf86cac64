//! Checksummed model checkpoints.
//!
//! Layout: one ASCII header line `ACCNET-CKPT v<version> crc32=<hex> len=<bytes>`
//! followed by a JSON body of exactly `len` bytes whose CRC-32 is `crc32`.
//! Floats are written with round-trip precision, so parameters reload bit-equal.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::MultiAgentModel;

pub const MAGIC: &str = "ACCNET-CKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Body {
    actors_only: bool,
    model: MultiAgentModel,
}

/// Serializes `model` (or its execution-only part) to checkpoint bytes.
pub fn to_bytes(model: &MultiAgentModel, actors_only: bool) -> Result<Vec<u8>> {
    let model = if actors_only { model.actors_only() } else { model.clone() };
    let body = serde_json::to_vec(&Body { actors_only, model })?;
    let crc = crc32fast::hash(&body);
    let mut out = format!("{MAGIC} v{VERSION} crc32={crc:08x} len={}\n", body.len()).into_bytes();
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<MultiAgentModel> {
    let corrupt = |m: &str| Error::Checkpoint(format!("corrupt checkpoint: {m}"));
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("missing header"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| corrupt("header is not text"))?;
    let mut parts = header.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(corrupt("bad magic"));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt("bad version field"))?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads v{VERSION})"
        )));
    }
    let crc = parts
        .next()
        .and_then(|v| v.strip_prefix("crc32="))
        .and_then(|v| u32::from_str_radix(v, 16).ok())
        .ok_or_else(|| corrupt("bad crc32 field"))?;
    let len: usize = parts
        .next()
        .and_then(|v| v.strip_prefix("len="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt("bad len field"))?;
    let body = &bytes[nl + 1..];
    if body.len() != len {
        return Err(corrupt(&format!("expected {len} body bytes, found {}", body.len())));
    }
    if crc32fast::hash(body) != crc {
        return Err(corrupt("checksum mismatch"));
    }
    let body: Body = serde_json::from_slice(body)?;
    let model = body.model.validated()?;
    if body.actors_only != model.is_actors_only() {
        return Err(corrupt("actors-only flag disagrees with stored components"));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &MultiAgentModel, path: &Path, actors_only: bool) -> Result<()> {
    std::fs::write(path, to_bytes(model, actors_only)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MultiAgentModel> {
    from_bytes(&std::fs::read(path)?)
}
