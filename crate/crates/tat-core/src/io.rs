//! Weight container and atomic file writes.
//!
//! Container layout: magic "TATW", version u32 LE, then records until EOF.
//! Record: name_len u32 LE, UTF-8 name, dim_count u32 LE, dims u64 LE each,
//! raw little-endian payload. Version 1 carries f32 data, version 2 f64;
//! readers accept both and convert to the build's element type. An f64
//! build writes version 2 so that save/load round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::tensor::Elem;
use std::io::Read;
use std::path::Path;

pub const TATW_MAGIC: [u8; 4] = *b"TATW";

#[cfg(feature = "f32")]
pub const TATW_NATIVE_VERSION: u32 = 1;
#[cfg(not(feature = "f32"))]
pub const TATW_NATIVE_VERSION: u32 = 2;

const MAX_DIMS: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<Elem>,
}

/// Write `bytes` to `path` via a temp file in the same directory plus an
/// atomic rename, so readers never observe a half-written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{stem}.tmp-{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize records into container bytes at the build's native precision.
pub fn encode_tensors(tensors: &[NamedTensor]) -> Vec<u8> {
    let payload: usize = tensors
        .iter()
        .map(|t| t.data.len() * std::mem::size_of::<Elem>() + t.name.len() + 16)
        .sum();
    let mut buf = Vec::with_capacity(8 + payload);
    buf.extend_from_slice(&TATW_MAGIC);
    push_u32(&mut buf, TATW_NATIVE_VERSION);
    for t in tensors {
        push_u32(&mut buf, t.name.len() as u32);
        buf.extend_from_slice(t.name.as_bytes());
        push_u32(&mut buf, t.shape.len() as u32);
        for &d in &t.shape {
            push_u64(&mut buf, d as u64);
        }
        for &v in &t.data {
            #[cfg(feature = "f32")]
            buf.extend_from_slice(&v.to_le_bytes());
            #[cfg(not(feature = "f32"))]
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    atomic_write(path, &encode_tensors(tensors))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                path: self.path.to_path_buf(),
                detail: format!(
                    "truncated while reading {what} (need {n} bytes at offset {})",
                    self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<Vec<NamedTensor>> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let magic = cur.take(4, "magic")?;
    if magic != TATW_MAGIC {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            detail: format!("bad magic {magic:?}, expected \"TATW\""),
        });
    }
    let version = cur.u32("version")?;
    let elem_size = match version {
        1 => 4usize,
        2 => 8usize,
        v => {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                detail: format!("unsupported container version {v}"),
            })
        }
    };
    let mut out = Vec::new();
    while !cur.done() {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint {
                path: path.to_path_buf(),
                detail: "tensor name is not valid UTF-8".into(),
            })?
            .to_string();
        let dim_count = cur.u32("dim count")?;
        if dim_count > MAX_DIMS {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                detail: format!("record \"{name}\" claims {dim_count} dims"),
            });
        }
        let mut shape = Vec::with_capacity(dim_count as usize);
        let mut numel = 1usize;
        for _ in 0..dim_count {
            let d = cur.u64("dim")? as usize;
            numel = numel.checked_mul(d).ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                detail: format!("record \"{name}\" shape overflows"),
            })?;
            shape.push(d);
        }
        let raw = cur.take(numel * elem_size, "tensor data")?;
        let data: Vec<Elem> = match version {
            1 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Elem)
                .collect(),
            _ => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Elem)
                .collect(),
        };
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

pub fn load_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes, path)
}
