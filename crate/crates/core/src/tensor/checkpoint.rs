//! Versioned binary checkpoint: a metadata string plus named tensors.
//!
//! ```text
//! magic   "HSSEGCKP"            8 bytes
//! version u32 LE                (currently 1)
//! meta    u32 LE length + UTF-8 bytes
//! count   u32 LE
//! entry*  u32 name length, name bytes, u32 rank, rank x u64 dims,
//!         numel x f64 LE (raw IEEE-754 bits)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HSSEGCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, metadata: impl Into<String>) -> Self {
        Self {
            metadata: metadata.into(),
            tensors: store
                .named()
                .map(|(n, t)| (n.to_string(), t.detached()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ckpt.metadata.len() as u32).to_le_bytes())?;
    w.write_all(ckpt.metadata.as_bytes())?;
    w.write_all(&(ckpt.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &ckpt.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                format: "checkpoint",
                offset: self.pos,
                detail: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let at = self.pos;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format {
            format: "checkpoint",
            offset: at,
            detail: format!("{what} is not valid UTF-8"),
        })
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io("<checkpoint stream>", e))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::Format {
            format: "checkpoint",
            offset: 0,
            detail: "bad magic".into(),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            format: "checkpoint",
            offset: 8,
            detail: format!("unsupported version {version}"),
        });
    }
    let metadata = c.string("metadata")?;
    let count = c.u32("entry count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = c.string("tensor name")?;
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_bits(u64::from_le_bytes(b.try_into().unwrap())))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    if c.pos != buf.len() {
        return Err(Error::Format {
            format: "checkpoint",
            offset: c.pos,
            detail: format!("{} trailing bytes", buf.len() - c.pos),
        });
    }
    Ok(Checkpoint { metadata, tensors })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, ckpt).expect("writing to memory");
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut bytes.as_slice())
}
