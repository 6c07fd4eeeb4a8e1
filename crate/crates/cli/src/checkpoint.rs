use std::path::Path;

use qatten_core::trainer::Snapshot;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MAGIC: &str = "QATTENCKPT";
pub const VERSION: u32 = 1;

/// Single-file checkpoint: a header line `QATTENCKPT <version> <sha256>`
/// followed by the JSON snapshot the digest covers. Written to a temporary
/// file and renamed into place.
pub fn save_checkpoint(path: &Path, snapshot: &Snapshot) -> Result<()> {
    let body = serde_json::to_vec(snapshot).map_err(|e| CliError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let digest = hex::encode(Sha256::digest(&body));
    let mut bytes = format!("{MAGIC} {VERSION} {digest}\n").into_bytes();
    bytes.extend_from_slice(&body);
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &bytes).map_err(CliError::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(CliError::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Snapshot> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    let fail = |reason: String| CliError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| fail("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| fail("header is not text".into()))?;
    let parts: Vec<&str> = header.split(' ').collect();
    if parts.len() != 3 || parts[0] != MAGIC {
        return Err(fail("not a checkpoint file".into()));
    }
    match parts[1].parse::<u32>() {
        Ok(VERSION) => {}
        Ok(v) => return Err(fail(format!("unsupported version {v} (expected {VERSION})"))),
        Err(_) => return Err(fail(format!("bad version `{}`", parts[1]))),
    }
    let body = &bytes[split + 1..];
    if hex::encode(Sha256::digest(body)) != parts[2] {
        return Err(fail("checksum mismatch: file is truncated or corrupt".into()));
    }
    serde_json::from_slice(body).map_err(|e| fail(e.to_string()))
}
