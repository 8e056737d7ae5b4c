//! The `TNRT` weight file.
//!
//! ```text
//! magic        4 bytes   "TNRT"
//! version      u32 LE    1
//! entry count  u32 LE
//! per entry (in ascending name order):
//!   name length  u16 LE
//!   name         UTF-8 bytes
//!   ndim         u8
//!   dims         u32 LE × ndim
//!   payload      f32 LE × product(dims)
//! ```
//!
//! Trailing bytes after the last entry are rejected.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::WeightStore;
use crate::engine::Param;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNRT";
pub const VERSION: u32 = 1;

pub fn write_weights(ws: &WeightStore, mut out: impl Write) -> Result<()> {
    let count = u32::try_from(ws.len())
        .map_err(|_| Error::Config("too many weight entries".into()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, p) in ws.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Config(format!("weight name too long: {name}")))?;
        let ndim = u8::try_from(p.dims().len())
            .map_err(|_| Error::Config(format!("too many dims for {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(ndim);
        for &d in p.dims() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Config(format!("dimension too large in {name}")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn save_weights(ws: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_weights(ws, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    read_weights(&fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a complete `TNRT` image. Any defect fails the whole read.
pub fn read_weights(bytes: &[u8]) -> Result<WeightStore> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        cur.pos = 0;
        return Err(cur.err("bad magic, expected \"TNRT\""));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        cur.pos -= 4;
        return Err(cur.err(format!("unsupported version {version}")));
    }
    let count = cur.u32("entry count")?;
    let mut ws = WeightStore::new();
    for _ in 0..count {
        let start = cur.pos;
        let len = cur.u16("name length")? as usize;
        let name_bytes = cur.take(len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Format {
                offset: (start + 2) as u64,
                msg: "name is not valid UTF-8".into(),
            })?
            .to_string();
        let ndim = cur.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32("dims")? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| cur.err(format!("dims {dims:?} overflow")))?;
        let payload = cur.take(numel, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if ws.insert(name.clone(), Param::new(dims, data)?).is_some() {
            return Err(Error::Format {
                offset: start as u64,
                msg: format!("duplicate entry `{name}`"),
            });
        }
    }
    if cur.pos != bytes.len() {
        return Err(cur.err(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(ws)
}
