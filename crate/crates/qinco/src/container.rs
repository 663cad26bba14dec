//! Versioned little-endian container: an 8-byte magic, a `u32` format
//! version, a `u32` section count, then sections of a 4-byte tag, a `u64`
//! payload length and the payload.

use crate::error::{format_err, Error, Result};

pub const VERSION: u32 = 1;

pub struct Writer {
    magic: [u8; 8],
    sections: Vec<([u8; 4], Vec<u8>)>,
}

impl Writer {
    pub fn new(magic: [u8; 8]) -> Self {
        Self {
            magic,
            sections: Vec::new(),
        }
    }

    pub fn section(&mut self, tag: [u8; 4], payload: Vec<u8>) -> &mut Self {
        self.sections.push((tag, payload));
        self
    }

    pub fn finish(&self) -> Vec<u8> {
        let total: usize = self.sections.iter().map(|(_, p)| 12 + p.len()).sum();
        let mut out = Vec::with_capacity(16 + total);
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (tag, payload) in &self.sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }
}

/// Payload builder.
#[derive(Default)]
pub struct Buf(pub Vec<u8>);

impl Buf {
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f32s(&mut self, v: &[f32]) -> &mut Self {
        self.0.reserve(4 * v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
        self
    }

    pub fn take(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.0)
    }
}

pub struct Section<'a> {
    pub tag: [u8; 4],
    /// Offset of the payload within the file.
    pub offset: u64,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Section<'a> {
    fn at(&self) -> u64 {
        self.offset + self.pos as u64
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .data
            .get(self.pos..self.pos.checked_add(n).unwrap_or(usize::MAX))
            .ok_or_else(|| format_err(self.at(), format!("section {} truncated", tag_name(self.tag))))?;
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A `u64` count or size that must fit in memory-sized arithmetic.
    pub fn len(&mut self) -> Result<usize> {
        let at = self.at();
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.data.len().max(1 << 20) * 8)
            .ok_or_else(|| format_err(at, format!("implausible length {v}")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| format_err(self.at(), "length overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn rest(&mut self) -> &'a [u8] {
        let out = &self.data[self.pos..];
        self.pos = self.data.len();
        out
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        format_err(self.at(), message)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.error(format!("{} trailing bytes in section {}", self.data.len() - self.pos, tag_name(self.tag))));
        }
        Ok(())
    }
}

fn tag_name(tag: [u8; 4]) -> String {
    String::from_utf8_lossy(&tag).into_owned()
}

pub struct Reader<'a> {
    sections: Vec<Section<'a>>,
}

impl<'a> Reader<'a> {
    pub fn parse(bytes: &'a [u8], magic: [u8; 8], kind: &'static str) -> Result<Self> {
        if bytes.len() < 8 || bytes[..8] != magic {
            return Err(Error::Magic { expected: kind });
        }
        let mut head = Section {
            tag: *b"HEAD",
            offset: 0,
            data: bytes,
            pos: 8,
        };
        let version = head.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                supported: VERSION,
            });
        }
        let count = head.u32()?;
        let mut sections = Vec::with_capacity(count.min(1024) as usize);
        for _ in 0..count {
            let start = head.at();
            let tag: [u8; 4] = head.bytes(4)?.try_into().unwrap();
            let len = head.u64()?;
            let len = usize::try_from(len)
                .ok()
                .filter(|&l| l <= bytes.len())
                .ok_or_else(|| format_err(start + 4, format!("section length {len} exceeds the file")))?;
            let offset = head.at();
            let data = head.bytes(len)?;
            sections.push(Section {
                tag,
                offset,
                data,
                pos: 0,
            });
        }
        head.finish()?;
        Ok(Self { sections })
    }

    /// Next section, which must carry `tag`.
    pub fn expect(&mut self, tag: [u8; 4]) -> Result<Section<'a>> {
        if self.sections.is_empty() {
            return Err(format_err(0, format!("missing section {}", tag_name(tag))));
        }
        let s = self.sections.remove(0);
        if s.tag != tag {
            return Err(format_err(
                s.offset.saturating_sub(12),
                format!("expected section {}, found {}", tag_name(tag), tag_name(s.tag)),
            ));
        }
        Ok(s)
    }

    pub fn finish(&self) -> Result<()> {
        match self.sections.first() {
            Some(s) => Err(format_err(s.offset.saturating_sub(12), format!("unexpected section {}", tag_name(s.tag)))),
            None => Ok(()),
        }
    }
}
