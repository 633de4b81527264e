//! Little-endian binary encoding helpers for the store files.

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("unexpected end of data at byte {0}")]
    Truncated(usize),
    #[error("bad magic header")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("invalid utf-8 string at byte {0}")]
    Utf8(usize),
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("corrupt payload: {0}")]
    Corrupt(String),
}

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

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len_u32(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }

    pub fn str(&mut self, s: &str) {
        self.len_u32(s.len());
        self.bytes(s.as_bytes());
    }

    pub fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn u32s(&mut self, v: &[u32]) {
        self.len_u32(v.len());
        for x in v {
            self.u32(*x);
        }
    }

    pub fn block(&mut self, b: &[u8]) {
        self.len_u32(b.len());
        self.bytes(b);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or(CodecError::Truncated(self.pos))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn len(&mut self) -> Result<usize, CodecError> {
        Ok(self.u32()? as usize)
    }

    pub fn str(&mut self) -> Result<String, CodecError> {
        let n = self.len()?;
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CodecError::Utf8(at))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CodecError> {
        let raw = self.take(n.checked_mul(4).ok_or(CodecError::Truncated(self.pos))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn u32s(&mut self) -> Result<Vec<u32>, CodecError> {
        let n = self.len()?;
        (0..n).map(|_| self.u32()).collect()
    }

    pub fn block(&mut self) -> Result<&'a [u8], CodecError> {
        let n = self.len()?;
        self.take(n)
    }

    pub fn finish(self) -> Result<(), CodecError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(CodecError::Trailing(n)),
        }
    }

    pub fn header(&mut self, magic: &[u8; 4], version: u16) -> Result<(), CodecError> {
        if self.take(4).map_err(|_| CodecError::BadMagic)? != magic {
            return Err(CodecError::BadMagic);
        }
        match self.u16()? {
            v if v == version => Ok(()),
            v => Err(CodecError::Version(v)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_round_trip() {
        let mut w = Writer::new();
        w.bytes(b"TEST");
        w.u16(1);
        w.str("héllo");
        w.u32s(&[1, 2, 3]);
        w.f32s(&[0.5, -1.25]);
        w.u8(7);
        let bytes = w.finish();
        let mut r = Reader::new(&bytes);
        r.header(b"TEST", 1).unwrap();
        assert_eq!(r.str().unwrap(), "héllo");
        assert_eq!(r.u32s().unwrap(), vec![1, 2, 3]);
        assert_eq!(r.f32s(2).unwrap(), vec![0.5, -1.25]);
        assert_eq!(r.u8().unwrap(), 7);
        r.finish().unwrap();
    }

    #[test]
    fn truncation_and_header_errors() {
        let mut r = Reader::new(b"TE");
        assert_eq!(r.header(b"TEST", 1), Err(CodecError::BadMagic));
        let mut r = Reader::new(b"TEST\x02\x00");
        assert_eq!(r.header(b"TEST", 1), Err(CodecError::Version(2)));
        let mut r = Reader::new(&[5, 0, 0, 0, b'a']);
        assert!(matches!(r.str(), Err(CodecError::Truncated(_))));
        let r = Reader::new(b"x");
        assert_eq!(r.finish(), Err(CodecError::Trailing(1)));
    }
}
