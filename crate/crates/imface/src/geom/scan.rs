//! Preprocessed-scan container: labels, sparse landmarks, dense surface
//! correspondences, and SDF training triplets in one little-endian file.
//!
//! Layout: magic "IMFSCAN1", identity and expression as length-prefixed
//! UTF-8, is_neutral (u8), then counts (k, n_dense, n_triplets as u32),
//! landmarks (k x 3 f64), dense sites (n x 9 f64: scan, neutral, template
//! positions), triplets (n x 7 f64: point, sdf, gradient).

use std::io::{self, Read};
use std::path::Path;

use super::sample::SampleTriplet;
use crate::error::ImfaceError;

const MAGIC: &[u8; 8] = b"IMFSCAN1";

/// One densely-supervised surface site: where it sits on this scan, on the
/// same identity's neutral scan, and on the population template.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseSite {
    pub scan: [f64; 3],
    pub neutral: [f64; 3],
    pub template: [f64; 3],
}

/// A fully preprocessed scan, ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub identity: String,
    pub expression: String,
    pub is_neutral: bool,
    /// Sparse landmarks, model-order, millimetres.
    pub landmarks: Vec<[f64; 3]>,
    /// Dense correspondences; may be empty for data without them.
    pub dense: Vec<DenseSite>,
    pub triplets: Vec<SampleTriplet>,
}

impl ScanRecord {
    pub fn save(&self, path: &Path) -> Result<(), ImfaceError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        for s in [&self.identity, &self.expression] {
            buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
            buf.extend_from_slice(s.as_bytes());
        }
        buf.push(self.is_neutral as u8);
        for n in [
            self.landmarks.len(),
            self.dense.len(),
            self.triplets.len(),
        ] {
            buf.extend_from_slice(&(n as u32).to_le_bytes());
        }
        let mut push = |v: f64| buf.extend_from_slice(&v.to_le_bytes());
        for l in &self.landmarks {
            l.iter().copied().for_each(&mut push);
        }
        for d in &self.dense {
            d.scan.iter().copied().for_each(&mut push);
            d.neutral.iter().copied().for_each(&mut push);
            d.template.iter().copied().for_each(&mut push);
        }
        for t in &self.triplets {
            t.point.iter().copied().for_each(&mut push);
            push(t.sdf);
            t.gradient.iter().copied().for_each(&mut push);
        }
        std::fs::write(path, buf).map_err(|e| ImfaceError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ImfaceError> {
        let data = std::fs::read(path).map_err(|e| ImfaceError::io(path, e))?;
        let mut r = io::Cursor::new(data);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| ImfaceError::io(path, e))?;
        if &magic != MAGIC {
            return Err(ImfaceError::Data(format!(
                "{}: not a scan record (bad magic)",
                path.display()
            )));
        }
        let identity = read_string(&mut r, path)?;
        let expression = read_string(&mut r, path)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(|e| ImfaceError::io(path, e))?;
        let is_neutral = flag[0] != 0;
        let k = read_u32(&mut r, path)? as usize;
        let n_dense = read_u32(&mut r, path)? as usize;
        let n_triplets = read_u32(&mut r, path)? as usize;
        let mut landmarks = Vec::with_capacity(k);
        for _ in 0..k {
            landmarks.push(read_vec3(&mut r, path)?);
        }
        let mut dense = Vec::with_capacity(n_dense);
        for _ in 0..n_dense {
            dense.push(DenseSite {
                scan: read_vec3(&mut r, path)?,
                neutral: read_vec3(&mut r, path)?,
                template: read_vec3(&mut r, path)?,
            });
        }
        let mut triplets = Vec::with_capacity(n_triplets);
        for _ in 0..n_triplets {
            let point = read_vec3(&mut r, path)?;
            let sdf = read_f64(&mut r, path)?;
            let gradient = read_vec3(&mut r, path)?;
            triplets.push(SampleTriplet {
                point,
                sdf,
                gradient,
            });
        }
        Ok(ScanRecord {
            identity,
            expression,
            is_neutral,
            landmarks,
            dense,
            triplets,
        })
    }
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32, ImfaceError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| ImfaceError::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, path: &Path) -> Result<f64, ImfaceError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| ImfaceError::io(path, e))?;
    Ok(f64::from_le_bytes(b))
}

fn read_vec3(r: &mut impl Read, path: &Path) -> Result<[f64; 3], ImfaceError> {
    Ok([read_f64(r, path)?, read_f64(r, path)?, read_f64(r, path)?])
}

fn read_string(r: &mut impl Read, path: &Path) -> Result<String, ImfaceError> {
    let len = read_u32(r, path)? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)
        .map_err(|e| ImfaceError::io(path, e))?;
    String::from_utf8(bytes)
        .map_err(|_| ImfaceError::Data(format!("{}: non-UTF8 label", path.display())))
}
