//! Versioned binary container for named tensors plus a JSON header.
//!
//! Layout: magic, `u32` format version, `u32` header length, JSON header,
//! little-endian tensor payload, FNV-1a 64-bit checksum of everything before it.
//! Writes go to a temporary file that is renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{DType, Real};
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"WBCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    dtype: DType,
    tensors: Vec<(String, usize, usize)>,
    meta: serde_json::Value,
}

/// Decoded container contents.
#[derive(Debug, Clone)]
pub struct Container<T> {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Matrix<T>)>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn push_scalar<T: Real>(out: &mut Vec<u8>, v: T) {
    match T::DTYPE {
        DType::F32 => out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
        DType::F64 => out.extend_from_slice(&v.to_f64_lossy().to_le_bytes()),
    }
}

pub fn encode<T: Real>(kind: &str, meta: serde_json::Value, tensors: &[(&str, &Matrix<T>)]) -> Result<Vec<u8>> {
    let header = Header {
        kind: kind.to_owned(),
        dtype: T::DTYPE,
        tensors: tensors.iter().map(|(n, m)| ((*n).to_owned(), m.rows(), m.cols())).collect(),
        meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Serde(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in tensors {
        for &v in m.as_slice() {
            push_scalar(&mut out, v);
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn decode<T: Real>(bytes: &[u8], path: &Path) -> Result<Container<T>> {
    let corrupt = |message: &str| Error::Corrupt { path: path.to_owned(), message: message.to_owned() };
    if bytes.len() < MAGIC.len() + 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch"));
    }
    let hlen = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    if 16 + hlen > body.len() {
        return Err(corrupt("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[16..16 + hlen]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    let width = header.dtype.size();
    let mut payload = &body[16 + hlen..];
    let expected: usize = header.tensors.iter().map(|(_, r, c)| r * c * width).sum();
    if payload.len() != expected {
        return Err(corrupt("payload size does not match header"));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (name, rows, cols) in header.tensors {
        let n = rows * cols;
        let (chunk, rest) = payload.split_at(n * width);
        payload = rest;
        let data = chunk
            .chunks_exact(width)
            .map(|b| match header.dtype {
                DType::F32 => T::from_f64_lossy(f64::from(f32::from_le_bytes(b.try_into().unwrap()))),
                DType::F64 => T::from_f64_lossy(f64::from_le_bytes(b.try_into().unwrap())),
            })
            .collect();
        tensors.push((name, Matrix::from_vec(rows, cols, data)));
    }
    Ok(Container { kind: header.kind, meta: header.meta, tensors })
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save<T: Real>(path: &Path, kind: &str, meta: serde_json::Value, tensors: &[(&str, &Matrix<T>)]) -> Result<()> {
    write_atomic(path, &encode(kind, meta, tensors)?)
}

/// Reads a container and checks its kind.
pub fn load<T: Real>(path: &Path, kind: &str) -> Result<Container<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let c = decode(&bytes, path)?;
    if c.kind != kind {
        return Err(Error::Corrupt {
            path: path.to_owned(),
            message: format!("expected a `{kind}` file, found `{}`", c.kind),
        });
    }
    Ok(c)
}
