//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes   "EKMBCKPT"
//! version     u32       currently 1
//! header_len  u64
//! header      header_len bytes of UTF-8 JSON {"config": …, "meta": …}
//! count       u32       number of tensor records
//! record × count:
//!   name_len  u32
//!   name      name_len bytes UTF-8
//!   rank      u32
//!   dims      rank × u64
//!   data      Π dims × f64 (IEEE-754 binary64 LE)
//! ```
//!
//! Tensor names: `param/<name>` (model parameters), `best/<name>` (best
//! validation snapshot), `adam.m/<name>`, `adam.v/<name>` and `ssl.f`
//! (cluster indicator).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataio::NormStats;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::trainer::EpochRecord;

pub const MAGIC: &[u8; 8] = b"EKMBCKPT";
pub const VERSION: u32 = 1;

/// Everything besides the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub d_feat: usize,
    pub rows: usize,
    pub cols: usize,
    pub norm: NormStats,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    pub bad_epochs: usize,
    /// early stopping fired (reaching `max_epochs` does not set it)
    pub stopped: bool,
    pub adam_t: u64,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RunConfig,
    meta: CheckpointMeta,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!(
                "checkpoint truncated while reading {what} at byte {} ({} bytes total)",
                self.pos,
                self.buf.len()
            ))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Format(format!("{what} does not fit in memory")))
    }
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose name starts with `prefix`, prefix stripped.
    pub fn group<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(
            32 + header.len() + self.tensors.iter().map(|(n, t)| 16 + n.len() + 8 * (t.rank() + t.len())).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = r.len("header length")?;
        let header: Header = serde_json::from_slice(r.take(header_len, "header")?)?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
        for i in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
                .to_string();
            let rank = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.len("tensor dimension")?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name}: dimensions overflow")))?;
            let bytes = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::Format(format!("tensor {name}: size overflow")))?,
                "tensor data",
            )?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                buf.len() - r.pos
            )));
        }
        Ok(Self {
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Free-function forms.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
