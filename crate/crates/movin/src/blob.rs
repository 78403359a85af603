//! Little-endian binary blobs with a fixed header:
//!
//! ```text
//! magic    8 bytes
//! version  u8
//! rank     u8
//! dims     rank x u32
//! payload  format-specific, little-endian
//! ```

use crate::error::FormatError;

pub const VERSION: u8 = 1;

/// Byte-buffer writer for one blob.
pub struct BlobWriter {
    buf: Vec<u8>,
}

impl BlobWriter {
    pub fn new(magic: &[u8; 8], dims: &[u32]) -> Self {
        let mut buf = Vec::with_capacity(10 + 4 * dims.len());
        buf.extend_from_slice(magic);
        buf.push(VERSION);
        buf.push(u8::try_from(dims.len()).expect("rank fits a byte"));
        for d in dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    pub fn f32s(&mut self, v: impl IntoIterator<Item = f32>) -> &mut Self {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        self
    }

    pub fn f64s(&mut self, v: impl IntoIterator<Item = f64>) -> &mut Self {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over one blob; every read checks the remaining length.
pub struct BlobReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> BlobReader<'a> {
    /// Checks magic and version and returns the dimensions.
    pub fn open(data: &'a [u8], magic: &[u8; 8]) -> Result<(Self, Vec<u32>), FormatError> {
        let mut r = Self { data, pos: 0 };
        let found: [u8; 8] = r.take(8)?.try_into().expect("eight bytes");
        if &found != magic {
            return Err(FormatError::BadMagic { expected: *magic, found });
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(FormatError::Version { found: version, supported: VERSION });
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<_, _>>()?;
        Ok((r, dims))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.data.len() - self.pos;
        if n > available {
            // report the whole shortfall, not just this field
            return Err(FormatError::Truncated { needed: self.pos + n, available: self.data.len() });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Fails early when fewer than `n` bytes remain, so huge declared
    /// shapes never trigger huge allocations.
    pub fn require(&self, n: usize) -> Result<(), FormatError> {
        let available = self.data.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated { needed: self.pos.saturating_add(n), available: self.data.len() });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        self.take(n)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| FormatError::Header("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| FormatError::Header("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect())
    }

    /// Asserts the payload was consumed exactly.
    pub fn finish(self) -> Result<(), FormatError> {
        match self.data.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

pub fn product(dims: &[u32]) -> Result<usize, FormatError> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize)).ok_or_else(|| FormatError::Header("shape overflows".into()))
}
