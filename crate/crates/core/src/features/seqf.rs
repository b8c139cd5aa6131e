//! `SEQF` tensor files.
//!
//! ```text
//! offset  size        field
//! 0       4           magic  b"SEQF"
//! 4       4           version (u32 LE) = 1
//! 8       4           ndim (u32 LE), 2 or 3
//! 12      4·ndim      extents (u32 LE each)
//! ..      4·Πextents  payload, f32 LE, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SEQF";
pub const VERSION: u32 = 1;

fn format_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

/// Serialises a rank-2 or rank-3 tensor.
pub fn encode(t: &Tensor<f32>) -> Result<Vec<u8>> {
    if !(2..=3).contains(&t.ndim()) {
        return Err(Error::shape(
            "write_seqf",
            format!("rank {} not in {{2, 3}}", t.ndim()),
        ));
    }
    let mut out = Vec::with_capacity(12 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::shape("write_seqf", format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], offset: usize, what: &str, path: &Path) -> Result<u32> {
    let b = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| format_err(path, bytes.len(), format!("truncated header: missing {what}")))?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

/// Parses a `SEQF` buffer; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    match bytes.get(0..4) {
        Some(m) if m == MAGIC => {}
        Some(m) => {
            return Err(format_err(
                path,
                0,
                format!("bad magic {:?}, expected \"SEQF\"", String::from_utf8_lossy(m)),
            ))
        }
        None => return Err(format_err(path, bytes.len(), "truncated header: missing magic")),
    }
    let version = read_u32(bytes, 4, "version", path)?;
    if version != VERSION {
        return Err(format_err(path, 4, format!("unsupported version {version}")));
    }
    let ndim = read_u32(bytes, 8, "ndim", path)? as usize;
    if !(2..=3).contains(&ndim) {
        return Err(format_err(path, 8, format!("ndim {ndim} not in {{2, 3}}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 12 + 4 * i;
        let d = read_u32(bytes, off, "extent", path)? as usize;
        if d == 0 {
            return Err(format_err(path, off, format!("extent {i} is zero")));
        }
        shape.push(d);
    }
    let header = 12 + 4 * ndim;
    let expected = shape
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(path, 12, "extents overflow"))?;
    let actual = bytes.len() - header;
    if actual != expected {
        return Err(format_err(
            path,
            header,
            format!("payload has {actual} bytes, expected {expected}"),
        ));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_seqf(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let bytes = encode(t)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_seqf(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes, path)
}
