//! Binary parameter-blob format shared by checkpoints.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic   4 bytes  b"PSPB"
//! version u16      1
//! count   u32      number of tensors
//! per tensor:
//!   name_len u16, name utf-8 bytes,
//!   ndim u8, dims u64 * ndim,
//!   data f32 * prod(dims)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use thiserror::Error;

use super::{HasParams, Scalar};

pub const MAGIC: &[u8; 4] = b"PSPB";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad parameter blob: {0}")]
    Format(String),
    #[error("parameter {0} missing from blob")]
    MissingParam(String),
    #[error("parameter {name} shape mismatch: blob {blob:?}, model {model:?}")]
    ShapeMismatch {
        name: String,
        blob: Vec<usize>,
        model: Vec<usize>,
    },
}

/// Serializes every parameter (trainable or not) to an in-memory blob.
pub fn to_bytes<T: Scalar, M: HasParams<T>>(module: &mut M) -> Vec<u8> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    module.visit_params(&mut |p| {
        entries.push((
            p.name.clone(),
            p.data.shape().to_vec(),
            p.data.iter().map(|v| v.as_f64() as f32).collect(),
        ));
    });
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, data) in entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(shape.len() as u8);
        for d in &shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Snapshots every parameter (trainable or not) as name -> f32 tensor.
pub fn to_map<T: Scalar, M: HasParams<T>>(module: &mut M) -> BTreeMap<String, ArrayD<f32>> {
    let mut out = BTreeMap::new();
    module.visit_params(&mut |p| {
        out.insert(p.name.clone(), p.data.mapv(|v| v.as_f64() as f32));
    });
    out
}

/// Serializes a parameter map in its sorted key order, so equal maps give
/// byte-identical blobs no matter where they came from.
pub fn map_to_bytes(map: &BTreeMap<String, ArrayD<f32>>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for (name, data) in map {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(data.ndim() as u8);
        for d in data.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Parses a blob into name -> tensor.
pub fn parse_bytes(bytes: &[u8]) -> Result<BTreeMap<String, ArrayD<f32>>, StoreError> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(StoreError::Format("wrong magic".into()));
    }
    let mut u16b = [0u8; 2];
    r.read_exact(&mut u16b)?;
    if u16::from_le_bytes(u16b) != VERSION {
        return Err(StoreError::Format("unsupported version".into()));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let count = u32::from_le_bytes(u32b);
    let mut out = BTreeMap::new();
    for _ in 0..count {
        r.read_exact(&mut u16b)?;
        let name_len = u16::from_le_bytes(u16b) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| StoreError::Format("non-utf8 tensor name".into()))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut dims = Vec::with_capacity(ndim[0] as usize);
        let mut u64b = [0u8; 8];
        for _ in 0..ndim[0] {
            r.read_exact(&mut u64b)?;
            dims.push(u64::from_le_bytes(u64b) as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut f32b = [0u8; 4];
        for _ in 0..len {
            r.read_exact(&mut f32b)?;
            data.push(f32::from_le_bytes(f32b));
        }
        let arr = ArrayD::from_shape_vec(dims, data)
            .map_err(|e| StoreError::Format(format!("bad tensor shape: {e}")))?;
        out.insert(name, arr);
    }
    Ok(out)
}

/// Loads a parsed blob into a module, matching by name and shape.
pub fn load_into<T: Scalar, M: HasParams<T>>(
    module: &mut M,
    blob: &BTreeMap<String, ArrayD<f32>>,
) -> Result<(), StoreError> {
    let mut err = None;
    module.visit_params(&mut |p| {
        if err.is_some() {
            return;
        }
        match blob.get(&p.name) {
            None => err = Some(StoreError::MissingParam(p.name.clone())),
            Some(arr) => {
                if arr.shape() != p.data.shape() {
                    err = Some(StoreError::ShapeMismatch {
                        name: p.name.clone(),
                        blob: arr.shape().to_vec(),
                        model: p.data.shape().to_vec(),
                    });
                } else {
                    ndarray::Zip::from(&mut p.data)
                        .and(arr)
                        .for_each(|d, &s| *d = T::fl(s as f64));
                }
            }
        }
    });
    err.map_or(Ok(()), Err)
}

pub fn write_file<T: Scalar, M: HasParams<T>>(
    module: &mut M,
    path: &Path,
) -> Result<Vec<u8>, StoreError> {
    let bytes = to_bytes(module);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(bytes)
}

pub fn read_file(path: &Path) -> Result<BTreeMap<String, ArrayD<f32>>, StoreError> {
    let bytes = std::fs::read(path)?;
    parse_bytes(&bytes)
}

/// Hex sha256 of a module's current parameter bytes. Used for checkpoint
/// manifests and the gradient-isolation assertions.
pub fn params_sha256<T: Scalar, M: HasParams<T>>(module: &mut M) -> String {
    use sha2::{Digest, Sha256};
    let bytes = to_bytes(module);
    hex::encode(Sha256::digest(&bytes))
}
