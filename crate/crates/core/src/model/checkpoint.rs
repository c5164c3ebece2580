//! Binary tensor tables: magic `HAG1`, a `u16` version, a `u32` tensor
//! count, then per tensor a `u32` name length, UTF-8 name, `u8` dtype
//! (0 = f32, 1 = f64), `u32` rank, `u32` dims and the row-major payload.
//! Integers and floats are little-endian.

use std::io::{Read, Write};

use thiserror::Error;

use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HAG1";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {got:?}, expected {want:?}")]
    ShapeMismatch { name: String, got: Vec<usize>, want: Vec<usize> },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Element type written to disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor)], dtype: Dtype) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[match dtype {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }])?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for &v in t.data() {
            match dtype {
                Dtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], CheckpointError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CheckpointError::Corrupt("truncated".into()),
        _ => CheckpointError::Io(e),
    })?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    Ok(u32::from_le_bytes(read_exact::<_, 4>(r)?))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    if &read_exact::<_, 4>(&mut r)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u16::from_le_bytes(read_exact::<_, 2>(&mut r)?);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| CheckpointError::Corrupt("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
        let dtype = read_exact::<_, 1>(&mut r)?[0];
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let width = match dtype {
            0 => 4,
            1 => 8,
            d => return Err(CheckpointError::UnsupportedDtype(d)),
        };
        let mut raw = vec![0u8; n * width];
        r.read_exact(&mut raw).map_err(|_| CheckpointError::Corrupt(format!("truncated payload of `{name}`")))?;
        let data: Vec<f64> = if width == 4 {
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect()
        } else {
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
        };
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

/// `(prefix + name, tensor)` for every entry of `store`.
pub fn store_tensors(store: &ParamStore, prefix: &str) -> Vec<(String, Tensor)> {
    store.named().map(|(n, t)| (format!("{prefix}{n}"), t.clone())).collect()
}

/// Fills `store` from `tensors`, looking each entry up as `prefix + name`.
pub fn load_store(store: &mut ParamStore, tensors: &[(String, Tensor)], prefix: &str) -> Result<(), CheckpointError> {
    let map: std::collections::HashMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let key = format!("{prefix}{}", store.name(id));
        let src = map.get(key.as_str()).ok_or_else(|| CheckpointError::MissingTensor(key.clone()))?;
        if src.shape() != store.get(id).shape() {
            return Err(CheckpointError::ShapeMismatch { name: key, got: src.shape().to_vec(), want: store.get(id).shape().to_vec() });
        }
        *store.get_mut(id) = (*src).clone();
    }
    Ok(())
}
