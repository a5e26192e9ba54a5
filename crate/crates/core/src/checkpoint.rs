//! Binary model checkpoints.
//!
//! Layout (little endian): magic `ELCCKPT\0`, `u32` version, `u64` length +
//! TOML echo of the model and training configs, `u32` tensor count, then per tensor `u32` name length,
//! name, `u32` rank, `u64` extents, `f64` values; finally a SHA-256 of all
//! preceding bytes.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::files::atomic_write;
use serde::{Deserialize, Serialize};

use crate::seg::{ParamStore, SegModel, SegModelConfig, TrainConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ELCCKPT\0";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Echo {
    model: SegModelConfig,
    train: TrainConfig,
}

/// A model together with the training configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SegModel,
    pub train: TrainConfig,
}

pub fn encode(model: &SegModel, train: &TrainConfig) -> Result<Vec<u8>> {
    let echo = Echo {
        model: model.config().clone(),
        train: train.clone(),
    };
    let config = toml::to_string(&echo)
        .map_err(|e| Error::Config(format!("cannot serialize model config: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Integrity("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Integrity("length overflows usize".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
    }
    let n = r.len()?;
    let text = std::str::from_utf8(r.take(n)?)
        .map_err(|_| Error::Integrity("config is not UTF-8".into()))?;
    let echo: Echo = toml::from_str(text).map_err(|e| Error::Integrity(format!("bad embedded config: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|l| l.checked_mul(8).is_some_and(|b| b <= body.len()))
            .ok_or_else(|| Error::Integrity(format!("implausible shape {shape:?}")))?;
        let data = r
            .take(len * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Integrity(e.to_string()))?;
        params.push(name, t).map_err(|e| Error::Integrity(e.to_string()))?;
    }
    if r.pos != body.len() {
        return Err(Error::Integrity("trailing bytes after tensor table".into()));
    }
    Ok(Checkpoint {
        model: SegModel::from_parts(echo.model, params)?,
        train: echo.train,
    })
}

/// Writes atomically: an interrupted save never leaves a partial file at
/// `path`.
pub fn save(path: &Path, model: &SegModel, train: &TrainConfig) -> Result<()> {
    atomic_write(path, &encode(model, train)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::data(path, e.to_string()))?;
    decode(&bytes)
}
