//! Versioned binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "ABEAMNET"
//! version  u32      currently 1
//! count    u32      number of tensors
//! entry*   name_len u32, name bytes (utf-8),
//!          ndim u8 (1 or 2), dims u64 x ndim,
//!          data f64 x prod(dims), row-major
//! ```
//!
//! Doubles are stored bit-exactly, so save -> load round-trips are
//! bit-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::nn::{ParamSet, TensorMut, TensorRef};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"ABEAMNET";
const VERSION: u32 = 1;

/// An owned tensor loaded from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    M(Array2<f64>),
    V(Array1<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::M(a) => a.len(),
            TensorData::V(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Write named tensors in declaration order.
pub fn save_tensors(path: &Path, tensors: &[(String, TensorRef<'_>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        match t {
            TensorRef::M(a) => {
                w.write_all(&[2u8])?;
                w.write_all(&(a.shape()[0] as u64).to_le_bytes())?;
                w.write_all(&(a.shape()[1] as u64).to_le_bytes())?;
                for &v in a.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            TensorRef::V(a) => {
                w.write_all(&[1u8])?;
                w.write_all(&(a.len() as u64).to_le_bytes())?;
                for &v in a.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Convenience wrapper for a whole parameter set.
pub fn save_params<P: ParamSet>(path: &Path, params: &P) -> Result<()> {
    save_tensors(path, &params.tensors())
}

fn corrupt(what: &str) -> Error {
    Error::Invalid(format!("checkpoint corrupt: {what}"))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated u32"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated u64"))?;
    Ok(u64::from_le_bytes(b))
}

/// Read every tensor, in file order.
pub fn load_tensors(path: &Path) -> Result<Vec<(String, TensorData)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("short magic"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Invalid(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(corrupt("implausible name length"));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|_| corrupt("truncated name"))?;
        let name = String::from_utf8(name_bytes).map_err(|_| corrupt("name not utf-8"))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim).map_err(|_| corrupt("truncated rank"))?;
        let data = match ndim[0] {
            1 => {
                let n = read_u64(&mut r)? as usize;
                TensorData::V(Array1::from_vec(read_doubles(&mut r, n)?))
            }
            2 => {
                let rows = read_u64(&mut r)? as usize;
                let cols = read_u64(&mut r)? as usize;
                let flat = read_doubles(&mut r, rows * cols)?;
                TensorData::M(
                    Array2::from_shape_vec((rows, cols), flat)
                        .map_err(|_| corrupt("shape/data mismatch"))?,
                )
            }
            other => return Err(corrupt(&format!("unsupported rank {other}"))),
        };
        out.push((name, data));
    }
    Ok(out)
}

fn read_doubles(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b).map_err(|_| corrupt("truncated tensor data"))?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

/// Assign loaded tensors into a parameter set by name. Every loaded tensor
/// must match an existing parameter (same name, rank and shape) and every
/// parameter must be covered.
pub fn load_params_into<P: ParamSet>(params: &mut P, loaded: &[(String, TensorData)]) -> Result<()> {
    let mut targets = params.tensors_mut();
    if targets.len() != loaded.len() {
        return Err(Error::Invalid(format!(
            "checkpoint has {} tensors, model expects {}",
            loaded.len(),
            targets.len()
        )));
    }
    for (name, data) in loaded {
        let slot = targets
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Invalid(format!("checkpoint tensor '{name}' not in model")))?;
        match (&mut slot.1, data) {
            (TensorMut::M(dst), TensorData::M(src)) => {
                if dst.shape() != src.shape() {
                    return Err(Error::Invalid(format!(
                        "tensor '{name}' shape {:?} does not match model {:?}",
                        src.shape(),
                        dst.shape()
                    )));
                }
                dst.assign(src);
            }
            (TensorMut::V(dst), TensorData::V(src)) => {
                if dst.len() != src.len() {
                    return Err(Error::Invalid(format!(
                        "tensor '{name}' length {} does not match model {}",
                        src.len(),
                        dst.len()
                    )));
                }
                dst.assign(src);
            }
            _ => {
                return Err(Error::Invalid(format!(
                    "tensor '{name}' rank does not match model"
                )))
            }
        }
    }
    Ok(())
}
