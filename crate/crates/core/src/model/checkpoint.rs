//! `NMCKPT01` checkpoint files.
//!
//! ```text
//! magic   8 bytes "NMCKPT01"
//! len     u64 LE, byte length of the JSON block
//! json    metadata: config, mode, step, extra, tensor index
//! data    f32 LE values of every tensor, in index order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::net::{Mode, NetMamba};
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NMCKPT01";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data block, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    mode: Mode,
    step: u64,
    #[serde(default)]
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub mode: Mode,
    pub step: u64,
    /// Free-form training state.
    pub extra: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn mismatch(name: &str, msg: impl Into<String>) -> Error {
    Error::CheckpointMismatch {
        name: name.to_string(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn from_model(model: &NetMamba<f32>, step: u64) -> Self {
        Self {
            config: model.cfg.clone(),
            mode: model.mode,
            step,
            extra: serde_json::Value::Null,
            tensors: model
                .store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    /// Copy tensors into every parameter of `store` accepted by `select`;
    /// each must be present with a matching shape.
    pub fn load_into(
        &self,
        store: &mut ParamStore<f32>,
        select: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| select(&p.name))
            .map(|(id, p)| (id, p.name.clone()))
            .collect();
        for (id, name) in ids {
            let t = self
                .get(&name)
                .ok_or_else(|| mismatch(&name, "missing from checkpoint"))?;
            if t.shape() != store.value(id).shape() {
                return Err(mismatch(
                    &name,
                    format!(
                        "checkpoint shape {:?}, model expects {:?}",
                        t.shape(),
                        store.value(id).shape()
                    ),
                ));
            }
            store.set_value(id, t.clone())?;
        }
        Ok(())
    }

    /// Rebuild the saved model exactly.
    pub fn to_model(&self) -> Result<NetMamba<f32>> {
        let mut model = NetMamba::new(self.config.clone(), self.mode, 0)?;
        self.load_into(&mut model.store, |_| true)?;
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries: Vec<TensorEntry> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect();
        let meta = Meta {
            config: self.config.clone(),
            mode: self.mode,
            step: self.step,
            extra: self.extra.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Parse {
                offset: bytes.len(),
                msg: "truncated checkpoint header".into(),
            });
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::UnsupportedFormat("missing NMCKPT01 magic".into()));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or(Error::Parse {
                offset: 8,
                msg: format!("metadata length {json_len} exceeds file"),
            })?;
        let meta: Meta = serde_json::from_slice(&bytes[16..data_start])?;
        let data = &bytes[data_start..];
        let mut expected = 0usize;
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for e in &meta.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected {
                return Err(mismatch(
                    &e.name,
                    format!("offset {} but expected {expected}", e.offset),
                ));
            }
            expected += n;
            let end = expected * 4;
            if end > data.len() {
                return Err(mismatch(&e.name, "tensor data runs past end of file"));
            }
            let vals = data[e.offset * 4..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(&e.shape, vals)?));
        }
        if expected * 4 != data.len() {
            return Err(Error::Parse {
                offset: data_start + expected * 4,
                msg: format!(
                    "{} trailing bytes after tensor data",
                    data.len() - expected * 4
                ),
            });
        }
        Ok(Self {
            config: meta.config,
            mode: meta.mode,
            step: meta.step,
            extra: meta.extra,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
