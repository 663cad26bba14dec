//! `.fvecs`, `.bvecs` and `.ivecs` files: each record is a little-endian
//! `i32` dimension followed by that many `f32`, `u8` or `i32` values.

use std::path::Path;

use qinco_core::Matrix;

use crate::error::{format_err, io_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VecsKind {
    F32,
    U8,
    I32,
}

impl VecsKind {
    pub fn elem_size(self) -> usize {
        match self {
            Self::F32 | Self::I32 => 4,
            Self::U8 => 1,
        }
    }

    pub fn from_extension(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "fvecs" => Some(Self::F32),
            "bvecs" => Some(Self::U8),
            "ivecs" => Some(Self::I32),
            _ => None,
        }
    }
}

/// Splits `bytes` into records, checking that every record has the same
/// positive dimension and that the file is not truncated. Returns the
/// dimension and the payload slices.
fn records(bytes: &[u8], kind: VecsKind) -> Result<(usize, Vec<&[u8]>)> {
    let mut out = Vec::new();
    let mut dim = None;
    let mut off = 0usize;
    while off < bytes.len() {
        let head = bytes
            .get(off..off + 4)
            .ok_or_else(|| format_err(off as u64, "truncated dimension field"))?;
        let d = i32::from_le_bytes(head.try_into().unwrap());
        if d <= 0 {
            return Err(format_err(off as u64, format!("non-positive dimension {d}")));
        }
        let d = d as usize;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(format_err(off as u64, format!("dimension {d} differs from {expected}")));
            }
            Some(_) => {}
        }
        let len = d * kind.elem_size();
        let body = bytes
            .get(off + 4..off + 4 + len)
            .ok_or_else(|| format_err(off as u64, "truncated record"))?;
        out.push(body);
        off += 4 + len;
    }
    Ok((dim.unwrap_or(0), out))
}

/// Parses `.fvecs` (or `.bvecs`, widened to `f32`) bytes.
pub fn parse_float_vecs(bytes: &[u8], kind: VecsKind) -> Result<Matrix<f32>> {
    let (d, recs) = records(bytes, kind)?;
    let mut data = Vec::with_capacity(recs.len() * d);
    for r in recs {
        match kind {
            VecsKind::F32 => data.extend(r.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()))),
            VecsKind::U8 => data.extend(r.iter().map(|&b| b as f32)),
            VecsKind::I32 => return Err(format_err(0, "integer vectors are not float data")),
        }
    }
    Ok(Matrix::from_vec(data.len() / d.max(1), d, data)?)
}

/// Parses `.ivecs` bytes into rows.
pub fn parse_ivecs(bytes: &[u8]) -> Result<Vec<Vec<i32>>> {
    let (_, recs) = records(bytes, VecsKind::I32)?;
    Ok(recs
        .into_iter()
        .map(|r| r.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
        .collect())
}

pub fn fvecs_bytes(m: &Matrix<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.rows() * (4 + 4 * m.cols()));
    for row in m.iter_rows() {
        out.extend_from_slice(&(row.len() as i32).to_le_bytes());
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn bvecs_bytes(rows: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    for row in rows {
        out.extend_from_slice(&(row.len() as i32).to_le_bytes());
        out.extend_from_slice(row);
    }
    out
}

pub fn ivecs_bytes(rows: &[Vec<i32>]) -> Vec<u8> {
    let mut out = Vec::new();
    for row in rows {
        out.extend_from_slice(&(row.len() as i32).to_le_bytes());
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Reads float vectors from `.fvecs` or `.bvecs` (chosen by extension,
/// defaulting to `.fvecs`).
pub fn read_vectors(path: &Path) -> Result<Matrix<f32>> {
    let kind = match VecsKind::from_extension(path) {
        Some(VecsKind::U8) => VecsKind::U8,
        _ => VecsKind::F32,
    };
    parse_float_vecs(&read_bytes(path)?, kind)
}

pub fn write_fvecs(path: &Path, m: &Matrix<f32>) -> Result<()> {
    write_bytes(path, &fvecs_bytes(m))
}

pub fn read_ivecs(path: &Path) -> Result<Vec<Vec<i32>>> {
    parse_ivecs(&read_bytes(path)?)
}

pub fn write_ivecs(path: &Path, rows: &[Vec<i32>]) -> Result<()> {
    write_bytes(path, &ivecs_bytes(rows))
}
