//! Single-file model archive.
//!
//! Layout: 8-byte magic `CSAVCKPT`, `u32` format version, `u64` header
//! length, a JSON header (configs, stage, tensor index, metadata), then the
//! tensors as little-endian `f64` in index order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{Avatar, CodeDims, Groups, ModelConfig};
use crate::renderer::RenderConfig;

pub const MAGIC: &[u8; 8] = b"CSAVCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Reconstruct,
    Edit,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Reconstruct => "reconstruct",
            Stage::Edit => "edit",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub avatar: Avatar,
    pub render: RenderConfig,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: Stage,
    model: ModelConfig,
    dims: CodeDims,
    render: RenderConfig,
    tensors: Vec<TensorEntry>,
    metadata: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0;
        self.avatar.visit_groups(Groups::ALL, &mut |name, shape, vals| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: shape.to_vec(),
                offset,
                len: vals.len(),
            });
            offset += vals.len();
            for v in vals {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        });
        let header = Header {
            stage: self.stage,
            model: self.avatar.config(),
            dims: self.avatar.dims(),
            render: self.render,
            tensors,
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Json {
            context: "checkpoint header".into(),
            source: e,
        })?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Json {
            context: "checkpoint header".into(),
            source: e,
        })?;
        let payload = &bytes[20 + hlen..];
        let mut avatar = Avatar::new(&header.model, header.dims.expr, 0)?;
        if avatar.dims() != header.dims {
            return Err(Error::Checkpoint(format!(
                "code dimensions {:?} do not match this build's {:?}",
                header.dims,
                avatar.dims()
            )));
        }
        let index: BTreeMap<&str, &TensorEntry> =
            header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut err = None;
        let mut seen = 0;
        avatar.visit_groups_mut(Groups::ALL, &mut |name, vals| {
            if err.is_some() {
                return;
            }
            let Some(t) = index.get(name) else {
                err = Some(Error::Checkpoint(format!("missing tensor `{name}`")));
                return;
            };
            if t.len != vals.len() {
                err = Some(Error::Checkpoint(format!(
                    "tensor `{name}` has {} values, model expects {}",
                    t.len,
                    vals.len()
                )));
                return;
            }
            let start = t.offset * 8;
            let Some(raw) = payload.get(start..start + 8 * t.len) else {
                err = Some(Error::Checkpoint(format!("tensor `{name}` truncated")));
                return;
            };
            for (v, chunk) in vals.iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            seen += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        let expected: usize = header.tensors.iter().map(|t| t.len).sum();
        if payload.len() != 8 * expected {
            return Err(Error::Checkpoint(format!(
                "payload is {} bytes, tensors need {}",
                payload.len(),
                8 * expected
            )));
        }
        if seen != header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "archive has {} tensors, model consumed {seen}",
                header.tensors.len()
            )));
        }
        Ok(Self {
            stage: header.stage,
            avatar,
            render: header.render,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}
