//! Versioned binary parameter files with a JSON config sidecar.
//!
//! Layout, all integers little-endian: `"SWTF"`, u32 version, u32 count, then
//! per entry u16 name length, UTF-8 name, u8 rank, u32 dims, f32 payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swt_tensor::Tensor;

use crate::config::{Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"SWTF";
pub const VERSION: u32 = 1;

/// Configuration stored next to the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub mode: Mode,
    pub model: ModelConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_tensors<'a>(entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(entries.len()).map_err(|_| Error::Config("too many tensors".into()))?.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Config(format!("{name} has too many dims")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Config(format!("{name} dimension too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Incompatible(format!(
            "{}: checkpoint version {version}, expected {VERSION}",
            path.display()
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn save(path: &Path, model: &Model, store: &ParamStore<f32>) -> Result<()> {
    let bytes = encode_tensors(store.iter().collect::<Vec<_>>().into_iter())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = CheckpointMeta {
        format_version: VERSION,
        mode: model.mode,
        model: model.config.clone(),
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta).expect("config serializes");
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = decode_tensors(&bytes, path)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    if meta.format_version != VERSION {
        return Err(Error::Incompatible(format!(
            "{}: sidecar version {}, expected {VERSION}",
            side.display(),
            meta.format_version
        )));
    }
    Ok(Checkpoint { meta, tensors })
}

impl Checkpoint {
    /// Rebuilds the model and fills every parameter from the file. Missing,
    /// extra or mis-shaped tensors are incompatibilities.
    pub fn restore(&self) -> Result<(Model, ParamStore<f32>)> {
        let (model, mut store) = Model::new::<f32>(&self.meta.model, self.meta.mode)?;
        if self.tensors.len() != store.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Incompatible(format!("unexpected tensor {name}")))?;
            let slot = store.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Incompatible(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok((model, store))
    }
}
