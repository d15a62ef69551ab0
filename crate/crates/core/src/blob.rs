//! Flat little-endian array blobs.
//!
//! Every array is written as
//!
//! ```text
//! u32   ndim
//! u64   dims[ndim]
//! f64   payload[prod(dims)]      (row-major)
//! ```
//!
//! with all integers and floats little-endian. A blob file is a plain
//! concatenation of such records; readers consume them in order.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

/// Upper bound on the element count of a single decoded array (1 GiB of f64).
const MAX_ELEMENTS: u64 = 1 << 27;
const MAX_NDIM: u32 = 8;

pub fn encode_array(shape: &[usize], data: &[f64], out: &mut Vec<u8>) {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(data.len() * 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_ndarray(a: &ArrayD<f64>, out: &mut Vec<u8>) {
    let data: Vec<f64> = a.iter().copied().collect();
    encode_array(a.shape(), &data, out);
}

/// Sequential reader over a concatenation of array records.
pub struct BlobReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BlobReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Decode(format!(
                    "truncated blob: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    /// Reads the next record as `(shape, data)`.
    pub fn next_array(&mut self) -> Result<(Vec<usize>, Vec<f64>)> {
        let ndim = u32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if ndim > MAX_NDIM {
            return Err(Error::Decode(format!("ndim {ndim} exceeds {MAX_NDIM}")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut count: u64 = 1;
        for _ in 0..ndim {
            let d = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
            count = count
                .checked_mul(d)
                .filter(|&c| c <= MAX_ELEMENTS)
                .ok_or_else(|| Error::Decode("array too large".into()))?;
            shape.push(d as usize);
        }
        let payload = self.take(count as usize * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((shape, data))
    }

    pub fn next_ndarray(&mut self) -> Result<ArrayD<f64>> {
        let (shape, data) = self.next_array()?;
        ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Decode(e.to_string()))
    }
}

/// Decodes every record in `buf`.
pub fn decode_all(buf: &[u8]) -> Result<Vec<(Vec<usize>, Vec<f64>)>> {
    let mut r = BlobReader::new(buf);
    let mut out = Vec::new();
    while !r.is_empty() {
        out.push(r.next_array()?);
    }
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
