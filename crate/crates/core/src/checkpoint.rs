//! Flat binary container of named `f64` arrays.
//!
//! Layout (all integers are little-endian `u64`):
//!
//! ```text
//! "AIB1" | count | { name_len | name (UTF-8) | rank | extents[rank] | f64 LE data }*
//! ```

use std::fs;
use std::path::Path;

use crate::error::{AibError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AIB1";

pub fn encode(arrays: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for (name, tensor) in arrays {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u64).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(AibError::format(
                self.path,
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(AibError::format(path, 0, "bad magic, expected AIB1"));
    }
    let count = r.u64("array count")?;
    let mut arrays = Vec::new();
    for _ in 0..count {
        let at = r.pos as u64;
        let name_len = r.u64("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| AibError::format(path, at, "array name is not UTF-8"))?
            .to_owned();
        let rank = r.u64("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, "array data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| AibError::format(path, at, format!("array `{name}`: {e}")))?;
        arrays.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(AibError::format(path, r.pos as u64, "trailing bytes after last array"));
    }
    Ok(arrays)
}

pub fn save(path: &Path, arrays: &[(&str, &Tensor)]) -> Result<()> {
    fs::write(path, encode(arrays)).map_err(|e| AibError::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| AibError::io(path, e))?;
    decode(&bytes, path)
}
