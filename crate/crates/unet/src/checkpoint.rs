//! Self-describing network checkpoints.
//!
//! Layout (little endian): `CNET`, version u16, u32 length + JSON
//! [`UNetConfig`], u32 tensor count, then per tensor a u16 name length, the
//! name, u8 rank, u32 dims and row-major f32 values; finally u32 length +
//! JSON normalization statistics (`null` when absent).

use std::path::Path;

use cfrc_core::mesh_ingest::NormStats;
use cfrc_core::{Error, Result, Scalar};
use ndarray::{ArrayD, IxDyn};

use crate::model::{UNet, UNetConfig};

pub const MAGIC: &[u8; 4] = b"CNET";
pub const VERSION: u16 = 1;

/// A loaded network together with its training-time normalization.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: UNet<T>,
    pub norm: Option<NormStats>,
}

pub fn encode<T: Scalar>(model: &mut UNet<T>, norm: Option<&NormStats>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config())?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    model.visit_params(&mut |name, p| {
        tensors.push((
            name.to_string(),
            p.value.shape().to_vec(),
            p.value.iter().map(|v| v.as_f64() as f32).collect(),
        ))
    });
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, data) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let norm = serde_json::to_vec(&norm)?;
    out.extend_from_slice(&(norm.len() as u32).to_le_bytes());
    out.extend_from_slice(&norm);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} bytes")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(4)? != MAGIC {
        c.pos = 0;
        return Err(c.fail("bad magic"));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(c.fail(format!("unsupported version {version}")));
    }
    let len = c.u32()? as usize;
    let config: UNetConfig =
        serde_json::from_slice(c.take(len)?).map_err(|e| c.fail(format!("config: {e}")))?;
    config.validate()?;
    let count = c.u32()? as usize;
    let mut tensors = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| c.fail("tensor name is not UTF-8"))?;
        let rank = c.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = c.take(n * 4)?;
        let values: Vec<T> = raw
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        tensors.insert(name, ArrayD::from_shape_vec(IxDyn(&dims), values).expect("length checked"));
    }
    let len = c.u32()? as usize;
    let norm: Option<NormStats> =
        serde_json::from_slice(c.take(len)?).map_err(|e| c.fail(format!("normalization: {e}")))?;
    if c.pos != bytes.len() {
        return Err(c.fail("trailing bytes"));
    }
    let mut model = UNet::build(config, 0)?;
    let mut problem = None;
    model.visit_params(&mut |name, p| match tensors.remove(name) {
        Some(v) if v.shape() == p.value.shape() => p.value = v,
        Some(v) => {
            problem.get_or_insert(format!("tensor {name} has shape {:?}, expected {:?}", v.shape(), p.value.shape()));
        }
        None => {
            problem.get_or_insert(format!("missing tensor {name}"));
        }
    });
    if let Some(extra) = tensors.keys().next() {
        problem.get_or_insert(format!("unexpected tensor {extra}"));
    }
    if let Some(reason) = problem {
        return Err(Error::Validation(format!("{}: {reason}", path.display())));
    }
    Ok(Checkpoint { model, norm })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &mut UNet<T>, norm: Option<&NormStats>) -> Result<()> {
    std::fs::write(path, encode(model, norm)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&std::fs::read(path)?, path)
}
