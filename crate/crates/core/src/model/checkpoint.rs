//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "WSTAMPCK"
//! version  u32
//! hlen     u32      length of the JSON header that follows
//! header   hlen bytes
//! count    u32      number of tensors
//! tensor*  u32 name length, name (utf-8), u32 rank, u32 per dim, f32 data (row-major)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Params, TinyDecoderModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"WSTAMPCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub sigma: f64,
    pub w_reg: f64,
    pub p: f64,
    pub step: u64,
}

pub fn save_checkpoint(path: &Path, model: &TinyDecoderModel, header: &CheckpointHeader) -> Result<()> {
    if header.model != model.config {
        return Err(Error::Usage("checkpoint header does not describe this model".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(header)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    let tensors = model.params.tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &dim in t.shape() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &x in t.iter() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    // write-then-rename so a failed write never leaves a partial file
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(TinyDecoderModel, CheckpointHeader)> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let hlen = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)?;
    let mut params = Params::zeros(&header.model);
    let count = r.u32()? as usize;
    let mut tensors = params.tensors_mut();
    if count != tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} tensors, model needs {}",
            tensors.len()
        )));
    }
    for (name, t) in tensors.iter_mut() {
        let nlen = r.u32()? as usize;
        let found = std::str::from_utf8(r.take(nlen)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        if found != name {
            return Err(Error::Format(format!("expected tensor {name}, found {found}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != t.shape() {
            return Err(Error::Shape(format!(
                "tensor {name}: checkpoint shape {shape:?}, model shape {:?}",
                t.shape()
            )));
        }
        let data = r.take(t.len() * 4)?;
        for (x, c) in t.iter_mut().zip(data.chunks_exact(4)) {
            *x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        }
    }
    drop(tensors);
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    let model = TinyDecoderModel::from_parts(header.model.clone(), params)?;
    Ok((model, header))
}
