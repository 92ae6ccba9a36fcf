//! Binary checkpoint container: named f64 tensors in a single little-endian
//! file.
//!
//! Layout: magic "IMFPP\0", format version (u32), tensor count (u64), then per
//! tensor: name length (u32), UTF-8 name, rank (u32), dims (u64 each), payload
//! (f64 each). Entries are written in sorted-name order so identical contents
//! produce identical bytes.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::ImfaceError;

const MAGIC: &[u8; 6] = b"IMFPP\0";
const VERSION: u32 = 1;

pub fn save_tensors(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<(), ImfaceError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| ImfaceError::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>, ImfaceError> {
    let data = std::fs::read(path).map_err(|e| ImfaceError::io(path, e))?;
    let mut r = io::Cursor::new(data);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|e| ImfaceError::io(path, e))?;
    if &magic != MAGIC {
        return Err(ImfaceError::Data(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(ImfaceError::Data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let count = read_u64(&mut r, path)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|e| ImfaceError::io(path, e))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ImfaceError::Data(format!("{}: non-UTF8 tensor name", path.display())))?;
        let rank = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut f = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut f).map_err(|e| ImfaceError::io(path, e))?;
            data.push(f64::from_le_bytes(f));
        }
        out.insert(name, Tensor::new(shape, data));
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32, ImfaceError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| ImfaceError::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64, ImfaceError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| ImfaceError::io(path, e))?;
    Ok(u64::from_le_bytes(b))
}

/// Write a serde-serializable value as pretty JSON (manifests, configs).
pub fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), ImfaceError> {
    let s = serde_json::to_string_pretty(value)
        .map_err(|e| ImfaceError::Data(format!("{}: {e}", path.display())))?;
    let mut f = std::fs::File::create(path).map_err(|e| ImfaceError::io(path, e))?;
    f.write_all(s.as_bytes())
        .map_err(|e| ImfaceError::io(path, e))?;
    f.write_all(b"\n").map_err(|e| ImfaceError::io(path, e))
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ImfaceError> {
    let s = std::fs::read_to_string(path).map_err(|e| ImfaceError::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| ImfaceError::Config(format!("{}: {e}", path.display())))
}
