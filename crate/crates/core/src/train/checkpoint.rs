//! Binary checkpoints: "EIVN", version, tensor records, then the run config.
//!
//! Layout (all integers u32 little-endian): magic, version, tensor count;
//! per tensor the name length, UTF-8 name, rank, dims and raw f32 data;
//! finally the config JSON length and bytes. Frozen backbones are not
//! stored; they are rebuilt from the seed in the config.

use std::path::Path;

use crate::autograd::Scalar;
use crate::error::{EivenError, Result};
use crate::nn::Named;

pub const MAGIC: &[u8; 4] = b"EIVN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<StoredTensor>,
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn from_named<T: Scalar>(tensors: &[Named<T>], config: serde_json::Value) -> Self {
        Checkpoint {
            tensors: tensors
                .iter()
                .map(|(name, t)| StoredTensor {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|v| v.f64() as f32).collect(),
                })
                .collect(),
            config,
        }
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let u32_of = |n: usize, what: &str| {
            u32::try_from(n).map_err(|_| EivenError::Checkpoint(format!("{what} {n} does not fit in u32")))
        };
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_of(self.tensors.len(), "tensor count")?.to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&u32_of(t.name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&u32_of(t.shape.len(), "rank")?.to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&u32_of(json.len(), "config length")?.to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(EivenError::Checkpoint("missing EIVN magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(EivenError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| EivenError::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| EivenError::Checkpoint("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(StoredTensor { name, shape, data });
        }
        let len = r.u32()? as usize;
        let config = serde_json::from_slice(r.take(len)?)?;
        if r.pos != bytes.len() {
            return Err(EivenError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { tensors, config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| EivenError::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| EivenError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| EivenError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies stored values into same-named tensors; every target must be
    /// present with a matching shape.
    pub fn restore<T: Scalar>(&self, targets: &[Named<T>]) -> Result<()> {
        for (name, t) in targets {
            let stored = self
                .get(name)
                .ok_or_else(|| EivenError::Checkpoint(format!("tensor {name} missing from checkpoint")))?;
            if stored.shape != t.shape() {
                return Err(EivenError::Checkpoint(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    stored.shape,
                    t.shape()
                )));
            }
            let values: Vec<T> = stored.data.iter().map(|&v| T::of(v as f64)).collect();
            t.assign(&values)?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| EivenError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
