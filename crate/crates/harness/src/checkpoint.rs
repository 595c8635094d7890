//! Named-tensor checkpoint container.
//!
//! Layout, all little-endian: magic `PTDT`, version `u32`, tensor count
//! `u32`, then per tensor the name length `u32`, UTF-8 name, rank `u32`,
//! dims `u64` each and the values as `f32`. A trailing block (`u32` length
//! then JSON) carries the training metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};
use smalldet_core::params::ParamTree;
use smalldet_core::Tensor;

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{HarnessError, Result};
use crate::model::ToyModelParams;

pub const MAGIC: &[u8; 4] = b"PTDT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub final_epoch: usize,
    /// Full-dataset loss after the last epoch.
    pub final_loss: f64,
    /// Full-dataset loss before the first update.
    pub initial_loss: f64,
    /// Mean training-batch loss per epoch.
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Values are `f32`-representable.
    pub tensors: Vec<(String, Tensor)>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    /// Snapshot of `params`, rounded to `f32`.
    pub fn from_params(params: &ToyModelParams, meta: TrainingMeta) -> Self {
        let tensors = params
            .named("")
            .into_iter()
            .map(|(n, t)| (n, t.map(|v| v as f32 as f64)))
            .collect();
        Checkpoint {
            version: VERSION,
            tensors,
            meta,
        }
    }

    /// Fills a model of the given architecture, requiring names and shapes
    /// to agree leaf by leaf.
    pub fn to_params(&self, config: ModelConfig) -> Result<ToyModelParams> {
        let template = ToyModelParams::init(config, &mut || 0.0)?;
        let mut stored = self.tensors.iter();
        let params = template.try_map("", &mut |name, t| match stored.next() {
            Some((n, v)) if n == name && v.shape() == t.shape() => Ok(v.clone()),
            Some((n, v)) => Err(HarnessError::Mismatch(format!(
                "tensor `{name}` expects shape {:?}, checkpoint has `{n}` with shape {:?}",
                t.shape(),
                v.shape()
            ))),
            None => Err(HarnessError::Mismatch(format!(
                "tensor `{name}` is missing from the checkpoint"
            ))),
        })?;
        if let Some((n, _)) = stored.next() {
            return Err(HarnessError::Mismatch(format!(
                "checkpoint has extra tensor `{n}`"
            )));
        }
        Ok(params)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.meta).expect("serializable");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.fail("not a PTDT checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(&format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.fail("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.fail("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| r.fail(&format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        let len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(len)?)
            .map_err(|e| r.fail(&format!("bad metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes after metadata"));
        }
        Ok(Checkpoint {
            version,
            tensors,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Checkpoint::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: &str) -> HarnessError {
        HarnessError::format(self.path, format!("{detail} (at byte {})", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(&format!("truncated: wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
