//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "TVCK"
//! version      u32      CHECKPOINT_VERSION
//! dtype        u8       1 = f32, 2 = f64
//! config       u32 length + UTF-8 JSON {"model": ModelConfig, "norm": InputNorm}
//! tensors      u32 count, then per tensor:
//!                u16 name length + UTF-8 name
//!                u8 kind (0 weight, 1 bias, 2 norm scale, 3 norm shift, 4 buffer)
//!                u8 rank, rank x u32 extents
//!                row-major values in `dtype`
//! metadata     u32 length + UTF-8 JSON CheckpointMeta
//! ```

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{InputNorm, ModelConfig, Network, ParamKind, Scalar};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// 1-based epoch the weights were taken from; 0 for untrained weights.
    pub epoch: usize,
    pub val_accuracy: f64,
    pub val_loss: f64,
    #[serde(default)]
    pub grid: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub tool_version: String,
}

#[derive(Serialize, Deserialize)]
struct ConfigBlock {
    model: ModelConfig,
    norm: InputNorm,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
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

    fn block(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

fn put_block(out: &mut Vec<u8>, data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.extend_from_slice(data);
}

impl<F: Scalar> Network<F> {
    pub fn checkpoint_bytes(&self, meta: &CheckpointMeta) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(F::DTYPE);
        let config = ConfigBlock {
            model: self.config.clone(),
            norm: self.norm,
        };
        put_block(&mut out, &serde_json::to_vec(&config).expect("serializable config"));
        let entries = self.store.entries();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for p in entries {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.kind.tag());
            out.push(p.value.ndim() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.value.iter() {
                v.write_le(&mut out);
            }
        }
        put_block(&mut out, &serde_json::to_vec(meta).expect("serializable metadata"));
        out
    }

    pub fn save_checkpoint(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.checkpoint_bytes(meta)).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint. When `expected` is given, the stored model
    /// configuration must equal it.
    pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(Self, CheckpointMeta)> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, expected)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<(Self, CheckpointMeta)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let dtype = r.u8()?;
        let width = match dtype {
            1 => 4,
            2 => 8,
            other => return Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
        };
        let config: ConfigBlock = serde_json::from_slice(r.block()?)
            .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        if let Some(exp) = expected {
            if exp != &config.model {
                return Err(Error::Checkpoint(format!(
                    "config mismatch: checkpoint has {:?}, expected {:?}",
                    config.model, exp
                )));
            }
        }
        let mut net = Network::<F>::new(config.model, 0)?;
        net.norm = config.norm;
        let count = r.u32()? as usize;
        if count != net.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {count} tensors, model expects {}",
                net.store.len()
            )));
        }
        for i in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let kind = ParamKind::from_tag(r.u8()?)
                .ok_or_else(|| Error::Checkpoint(format!("bad kind tag for {name}")))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * width)?;
            let values: Vec<F> = raw
                .chunks_exact(width)
                .map(|b| {
                    if width == F::BYTES {
                        F::read_le(b)
                    } else if width == 4 {
                        F::of(f32::read_le(b) as f64)
                    } else {
                        F::of(f64::read_le(b))
                    }
                })
                .collect();
            let slot = &mut net.store.entries_mut()[i];
            if slot.name != name || slot.kind != kind || slot.value.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} is {name} {shape:?}, model expects {} {:?}",
                    slot.name,
                    slot.value.shape()
                )));
            }
            slot.value = ArrayD::from_shape_vec(IxDyn(&shape), values)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let meta: CheckpointMeta = serde_json::from_slice(r.block()?)
            .map_err(|e| Error::Checkpoint(format!("metadata block: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after metadata".into()));
        }
        Ok((net, meta))
    }
}
