//! Canonical binary encoding shared by every signed or hashed structure.
//!
//! Fields are written in declaration order, integers are big-endian and
//! variable-length octet strings carry a `u32` length prefix. Decoding is
//! strict: trailing bytes and truncated input are errors.

use thiserror::Error;

/// Decoding failures. Encoding cannot fail.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("unexpected end of input")]
    Truncated,
    #[error("{0} trailing octets")]
    Trailing(usize),
    #[error("invalid tag {tag:#04x} for {what}")]
    InvalidTag { what: &'static str, tag: u8 },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("invalid field: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts a file-level encoding with a 4-octet magic and a version octet.
    pub fn with_header(magic: &[u8; 4], version: u8) -> Self {
        let mut enc = Self::new();
        enc.buf.extend_from_slice(magic);
        enc.buf.push(version);
        enc
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    /// Fixed-width field, no length prefix.
    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    /// Length-prefixed octet string.
    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.u32(bytes.len() as u32);
        self.raw(bytes)
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    input: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        Self { input, pos: 0 }
    }

    /// Checks a file header written by [`Encoder::with_header`].
    pub fn with_header(input: &'a [u8], magic: &[u8; 4], version: u8) -> Result<Self, CodecError> {
        let mut dec = Self::new(input);
        if dec.raw(4)? != magic {
            return Err(CodecError::BadMagic);
        }
        let v = dec.u8()?;
        if v != version {
            return Err(CodecError::UnsupportedVersion(v));
        }
        Ok(dec)
    }

    pub fn remaining(&self) -> usize {
        self.input.len() - self.pos
    }

    pub fn raw(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::Truncated);
        }
        let out = &self.input[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.raw(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.raw(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub fn bool(&mut self) -> Result<bool, CodecError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            tag => Err(CodecError::InvalidTag { what: "bool", tag }),
        }
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let len = self.u32()? as usize;
        self.raw(len)
    }

    pub fn vec(&mut self) -> Result<Vec<u8>, CodecError> {
        Ok(self.bytes()?.to_vec())
    }

    pub fn string(&mut self) -> Result<String, CodecError> {
        String::from_utf8(self.vec()?).map_err(|_| CodecError::Invalid("utf-8 string"))
    }

    /// Reads a `u32` element count, refusing counts that cannot fit in the
    /// remaining input given a minimum element size.
    pub fn count(&mut self, min_elem_len: usize) -> Result<usize, CodecError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_elem_len.max(1)) > self.remaining() {
            return Err(CodecError::Truncated);
        }
        Ok(n)
    }

    pub fn finish(self) -> Result<(), CodecError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(CodecError::Trailing(n)),
        }
    }
}
