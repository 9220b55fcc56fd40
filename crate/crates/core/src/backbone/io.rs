//! Backbone container format.
//!
//! ```text
//! magic      8 bytes  "MOPSBKB1"
//! hdr_len    u32 LE   length of the JSON config header
//! header     hdr_len bytes of UTF-8 JSON (ModelConfig)
//! count      u64 LE   number of f64 values that follow
//! values     count × f64 LE, tensors in declaration order
//! ```
//!
//! A pretty-printed copy of the config is written next to the container
//! with a `.json` extension.

use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{Backbone, ModelConfig};
use crate::error::{MopsError, Result};

const MAGIC: &[u8; 8] = b"MOPSBKB1";

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode_backbone(backbone: &Backbone) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&backbone.config)?;
    let count = backbone.parameter_count();
    let mut out = Vec::with_capacity(8 + 4 + header.len() + 8 + count * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for (_, t) in backbone.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| MopsError::Format(format!("truncated at byte {}", *pos)))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn decode_backbone(bytes: &[u8]) -> Result<Backbone> {
    let mut pos = 0;
    if take(bytes, &mut pos, 8)? != MAGIC {
        return Err(MopsError::Format("bad magic bytes".into()));
    }
    let hdr_len = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let config: ModelConfig = serde_json::from_slice(take(bytes, &mut pos, hdr_len)?)?;
    let count = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().expect("8 bytes")) as usize;
    let mut backbone = Backbone::init(&config, 0)?;
    if count != backbone.parameter_count() {
        return Err(MopsError::Format(format!(
            "header describes {} parameters but the file declares {count}",
            backbone.parameter_count()
        )));
    }
    for (_, t) in backbone.tensors_mut() {
        for v in t.iter_mut() {
            *v = f64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().expect("8 bytes"));
        }
    }
    if pos != bytes.len() {
        return Err(MopsError::Format(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(backbone)
}

pub fn save_backbone(backbone: &Backbone, path: &Path) -> Result<()> {
    fs::write(path, encode_backbone(backbone)?)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&backbone.config)? + "\n")?;
    Ok(())
}

pub fn load_backbone(path: &Path) -> Result<Backbone> {
    let backbone = decode_backbone(&fs::read(path)?)?;
    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        let declared: ModelConfig = serde_json::from_str(&fs::read_to_string(&sidecar)?)?;
        if declared != backbone.config {
            return Err(MopsError::Format(format!(
                "{} disagrees with the config embedded in {}",
                sidecar.display(),
                path.display()
            )));
        }
    }
    Ok(backbone)
}
