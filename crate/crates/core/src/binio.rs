//! Little-endian helpers shared by the checkpoint and dataset file formats.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len_u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::invalid("encode", format!("length {v} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Rank, dims, then data.
    pub fn tensor(&mut self, t: &Tensor) -> Result<()> {
        self.len_u32(t.rank())?;
        for &d in t.shape() {
            self.len_u32(d)?;
        }
        self.f32s(t.data());
        Ok(())
    }

    /// Appends the CRC32 of everything written so far and returns the buffer.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    kind: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic bytes and version, returning a reader positioned after them.
    pub fn open(kind: &'static str, buf: &'a [u8], magic: [u8; 4], supported: u32) -> Result<(Self, u32)> {
        let mut r = Self { kind, buf, pos: 0 };
        let found: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found });
        }
        let version = r.u32()?;
        if version == 0 || version > supported {
            return Err(Error::UnsupportedVersion {
                kind,
                found: version,
                supported,
            });
        }
        Ok((r, version))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(self.kind))?;
        if end > self.buf.len() {
            return Err(Error::Truncated(self.kind));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(Error::Truncated(self.kind))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.usize()?;
        if rank > 8 {
            return Err(Error::Format {
                kind: self.kind,
                detail: format!("tensor rank {rank} is implausible"),
            });
        }
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::Truncated(self.kind))?;
        let data = self.f32s(n)?;
        Tensor::new(shape, data).map_err(|e| Error::Format {
            kind: self.kind,
            detail: e.to_string(),
        })
    }

    /// Verifies the trailing CRC32 and that nothing follows it.
    pub fn finish(mut self) -> Result<()> {
        let body_end = self.pos;
        let stored = self.u32()?;
        let computed = crc32fast::hash(&self.buf[..body_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        if self.pos != self.buf.len() {
            return Err(Error::Format {
                kind: self.kind,
                detail: format!("{} trailing bytes after checksum", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}
