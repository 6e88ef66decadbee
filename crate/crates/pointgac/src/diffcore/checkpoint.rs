//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   [u8; 4] = b"PGCK"
//! version u32     = 1
//! digest  u64       config digest of the producing run
//! count   u32       number of named blocks
//! blocks  count × { name_len u16, name utf-8,
//!                   ndim u8, dims u64 × ndim,
//!                   values f64 × prod(dims) (raw bits) }
//! ```
//!
//! Values are written as raw f64 bits, so a save/load round trip is
//! bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PGCK";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint(path: &Path, digest: u64, blocks: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&digest.to_le_bytes());
    buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, tensor) in blocks {
        let name_bytes = name.as_bytes();
        assert!(name_bytes.len() <= u16::MAX as usize);
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &buf)
}

pub fn read_checkpoint(path: &Path) -> Result<(u64, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::invalid(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::invalid(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let digest = r.u64()?;
    let count = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::invalid(format!("{}: block name not utf-8", path.display())))?;
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        blocks.push((name, Tensor::new(shape, data)));
    }
    Ok((digest, blocks))
}

/// Write via a temp file in the same directory, then rename into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{}: not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::invalid(format!(
                "{}: truncated checkpoint at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
