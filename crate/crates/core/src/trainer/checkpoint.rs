//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      4 bytes  "FMCK"
//! version    u32      1
//! task       u8       0 = segmentation, 1 = detection
//! role       u8       0 = teacher, 1 = student
//! strategy   u8       0 = supervised, 1 = distill, 2 = distill-aux
//! steps      u64
//! seed       u64
//! n_layers   u32
//!   kind u8, in_channels u32, out_channels u32      (per layer)
//! n_arrays   u32
//!   name_len u32, name utf-8, len u64, len x f64     (per array)
//! ```

use std::path::Path;

use crate::fsutil::{read, write_atomic};
use crate::nn::{LayerKind, LayerSpec, NetworkSpec, ParamSet, Role};
use crate::{Error, Result};

use super::{Strategy, Task};

pub const MAGIC: &[u8; 4] = b"FMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingMeta {
    pub strategy: Strategy,
    pub steps: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub task: Task,
    pub spec: NetworkSpec,
    pub params: ParamSet,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    /// Label used in reports: `teacher` or the student's strategy.
    pub fn label(&self) -> String {
        match self.spec.role {
            Role::Teacher => "teacher".to_string(),
            Role::Student => self.meta.strategy.name().to_string(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + self.params.len() * 8);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.push(self.task.code());
        b.push(match self.spec.role {
            Role::Teacher => 0,
            Role::Student => 1,
        });
        b.push(self.meta.strategy.code());
        b.extend_from_slice(&self.meta.steps.to_le_bytes());
        b.extend_from_slice(&self.meta.seed.to_le_bytes());
        b.extend_from_slice(&(self.spec.layers.len() as u32).to_le_bytes());
        for l in &self.spec.layers {
            b.push(l.kind.code());
            b.extend_from_slice(&(l.in_channels as u32).to_le_bytes());
            b.extend_from_slice(&(l.out_channels as u32).to_le_bytes());
        }
        b.extend_from_slice(&(self.params.entries().len() as u32).to_le_bytes());
        for (name, values) in self.params.entries() {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.bad(&format!("unsupported version {version}")));
        }
        let task = Task::from_code(r.u8()?).ok_or_else(|| r.bad("unknown task"))?;
        let role = match r.u8()? {
            0 => Role::Teacher,
            1 => Role::Student,
            _ => return Err(r.bad("unknown role")),
        };
        let strategy = Strategy::from_code(r.u8()?).ok_or_else(|| r.bad("unknown strategy"))?;
        let steps = r.u64()?;
        let seed = r.u64()?;
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            let kind = LayerKind::from_code(r.u8()?).ok_or_else(|| r.bad("unknown layer kind"))?;
            layers.push(LayerSpec {
                kind,
                in_channels: r.u32()? as usize,
                out_channels: r.u32()? as usize,
            });
        }
        let spec = NetworkSpec { layers, role };
        let n_arrays = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n_arrays.min(1024));
        for _ in 0..n_arrays {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.bad("parameter name is not utf-8"))?
                .to_string();
            let n = r.u64()? as usize;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| r.bad("array too large"))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((name, values));
        }
        if r.pos != bytes.len() {
            return Err(r.bad("trailing bytes"));
        }
        let params = ParamSet::new(entries);
        spec.validate()?;
        params.check_against(&spec)?;
        Ok(Checkpoint {
            task,
            spec,
            params,
            meta: TrainingMeta {
                strategy,
                steps,
                seed,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bad(&self, reason: &str) -> Error {
        Error::Format {
            kind: "checkpoint",
            reason: format!("{reason} (at byte {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.bad("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
