//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TODI"                       magic
//! u32                          format version
//! u16 + bytes                  module tag (UTF-8)
//! u32 + bytes                  metadata (UTF-8 JSON: config, vocabularies)
//! u32                          tensor count
//! per tensor:
//!   u16 + bytes                name
//!   u8                         rank
//!   u32 * rank                 extents
//!   f32 * product(extents)     payload
//! u32                          CRC32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::numerics::{ParamSet, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TODI";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tag: String,
    pub meta: String,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(tag: impl Into<String>, meta: impl Into<String>, params: ParamSet) -> Self {
        Checkpoint { tag: tag.into(), meta: meta.into(), params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let too_long = |what: &str| Error::Checkpoint(format!("{what} is too long to store"));
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let tag = u16::try_from(self.tag.len()).map_err(|_| too_long("module tag"))?;
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(self.tag.as_bytes());
        let meta = u32::try_from(self.meta.len()).map_err(|_| too_long("metadata"))?;
        out.extend_from_slice(&meta.to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        let count = u32::try_from(self.params.len()).map_err(|_| too_long("tensor table"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in self.params.iter() {
            let n = u16::try_from(name.len()).map_err(|_| too_long("tensor name"))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| too_long("tensor rank"))?;
            out.push(rank);
            for &e in t.shape() {
                let e = u32::try_from(e).map_err(|_| too_long("tensor extent"))?;
                out.extend_from_slice(&e.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (missing TODI magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "format version {version} needs migration: this build reads version {FORMAT_VERSION}; \
                 re-export the checkpoint with a matching build"
            )));
        }
        if bytes.len() < 12 {
            return Err(bad("truncated checkpoint".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(bad(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let tag_len = r.u16()? as usize;
        let tag = r.string(tag_len)?;
        let meta_len = r.u32()? as usize;
        let meta = r.string(meta_len)?;
        let count = r.u32()?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = r.string(name_len)?;
            if params.find(&name).is_some() {
                return Err(bad(format!("duplicate tensor {name}")));
            }
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e)).ok_or_else(|| bad("tensor too large".into()))?;
            let payload = r.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large".into()))?)?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
            params.add(name, t);
        }
        if r.pos != body.len() {
            return Err(bad(format!("{} trailing bytes after the tensor table", body.len() - r.pos)));
        }
        Ok(Checkpoint { tag, meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("checkpoint {}", path.display())));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads and checks the module tag.
    pub fn load_tagged(path: &Path, tag: &str) -> Result<Self> {
        let c = Self::load(path)?;
        if c.tag != tag {
            return Err(Error::Checkpoint(format!("{} holds a {} checkpoint, expected {tag}", path.display(), c.tag)));
        }
        Ok(c)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string field is not UTF-8".into()))
    }
}
