//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! "BAACKPT1" | version u16 | fingerprint [u8; 32] | count u32
//! count × ( name_len u16 | name | rank u8 | dims u32[rank] | f32[numel] )
//! epochs u32 | final_lr f64 | meta_len u32 | meta (JSON)
//! ```
//!
//! The JSON trailer carries whatever is needed to rebuild the model
//! (its config, the training config, provenance).

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::Regressor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BAACKPT1";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: [u8; 32],
    /// Stored at 32-bit precision.
    pub tensors: Vec<(String, Tensor)>,
    pub epochs: u32,
    pub final_lr: f64,
    pub meta: serde_json::Value,
}

/// SHA-256 of the canonical JSON form of `value` (object keys sorted).
pub fn fingerprint<T: Serialize>(value: &T) -> [u8; 32] {
    let canonical = serde_json::to_value(value).and_then(|v| serde_json::to_vec(&v));
    let bytes = canonical.expect("config serializes");
    Sha256::digest(&bytes).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

impl Checkpoint {
    pub fn from_regressor<M: Regressor>(
        model: &M,
        fingerprint: [u8; 32],
        epochs: u32,
        final_lr: f64,
        meta: serde_json::Value,
    ) -> Self {
        Checkpoint {
            fingerprint,
            tensors: model
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.quantized_f32()))
                .collect(),
            epochs,
            final_lr,
            meta,
        }
    }

    pub fn fingerprint_hex(&self) -> String {
        hex(&self.fingerprint)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&self.epochs.to_le_bytes());
        out.extend_from_slice(&self.final_lr.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let fingerprint = r.array::<32>()?;
        let count = u32::from_le_bytes(r.array()?);
        let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.array::<1>()?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(r.array()?) as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("tensor {name} too large")))?;
            let data = r
                .take(bytes)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        let epochs = u32::from_le_bytes(r.array()?);
        let final_lr = f64::from_le_bytes(r.array()?);
        let meta_len = u32::from_le_bytes(r.array()?) as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            fingerprint,
            tensors,
            epochs,
            final_lr,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn tensor_map(&self) -> BTreeMap<String, Tensor> {
        self.tensors.iter().cloned().collect()
    }

    /// Rebuilds a single model from the `model` entry of the metadata.
    pub fn load_model(&self) -> Result<Model> {
        if self.meta.get("kind").and_then(|k| k.as_str()) != Some("model") {
            return Err(Error::Format("checkpoint does not hold a single model".into()));
        }
        let config: ModelConfig = serde_json::from_value(self.meta["model"].clone())
            .map_err(|e| Error::Format(format!("checkpoint model config: {e}")))?;
        let mut model = Model::build(&config, 0)?;
        model.load_named(&self.tensor_map())?;
        Ok(model)
    }
}
