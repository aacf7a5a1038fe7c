//! File helpers: atomic writes and the `TATLT` tensor file.
//!
//! Tensor file layout (all integers little-endian):
//! `b"TATLT\0"`, version `u16`, rank `u8`, `rank` dims as `u32`, then the
//! payload as IEEE-754 `f64`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::TensorF;

pub const TENSOR_MAGIC: &[u8; 6] = b"TATLT\0";
pub const FORMAT_VERSION: u16 = 1;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn put_dims_and_payload(out: &mut Vec<u8>, tensor: &TensorF) {
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in tensor.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Little-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    pub(crate) fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn tensor(&mut self) -> std::result::Result<TensorF, String> {
        let rank = self.u8()? as usize;
        let dims = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or("tensor size overflows")?;
        let raw = self.take(len.checked_mul(8).ok_or("tensor size overflows")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        TensorF::from_vec(&dims, data).map_err(|e| e.to_string())
    }
}

pub fn tensor_to_bytes(tensor: &TensorF) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * tensor.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_dims_and_payload(&mut out, tensor);
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> std::result::Result<TensorF, String> {
    let mut r = Reader::new(bytes);
    if r.take(TENSOR_MAGIC.len())? != TENSOR_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let t = r.tensor()?;
    if !r.at_end() {
        return Err("trailing bytes".into());
    }
    Ok(t)
}

pub fn write_tensor(path: &Path, tensor: &TensorF) -> Result<()> {
    write_atomic(path, &tensor_to_bytes(tensor))
}

pub fn read_tensor(path: &Path) -> Result<TensorF> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    tensor_from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
}
