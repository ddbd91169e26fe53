//! Little-endian binary container shared by dataset, mask, trace and
//! checkpoint files: 4-byte magic, `u16` version, body, trailing CRC32 of
//! every preceding byte.

use crate::error::FormatError;
use crate::tensor::Tensor;

pub const DTYPE_F64: u8 = 0;
pub const DTYPE_I32: u8 = 1;

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u16) -> Self {
        let mut w = Writer { buf: Vec::with_capacity(1024) };
        w.buf.extend_from_slice(magic);
        w.u16(version);
        w
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

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// `u32` length then UTF-8 bytes.
    pub fn str(&mut self, s: &str) {
        self.u32(u32::try_from(s.len()).expect("string longer than 4 GiB"));
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn dims(&mut self, dtype: u8, shape: &[usize]) {
        self.u8(dtype);
        self.u8(u8::try_from(shape.len()).expect("more than 255 dimensions"));
        for &d in shape {
            self.u32(u32::try_from(d).expect("extent exceeds u32"));
        }
    }

    pub fn tensor_f64(&mut self, t: &Tensor) {
        self.dims(DTYPE_F64, t.shape());
        for v in t.data() {
            self.f64(*v);
        }
    }

    pub fn tensor_i32(&mut self, shape: &[usize], data: &[i32]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.dims(DTYPE_I32, shape);
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

/// A decoded tensor block.
#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    F64(Tensor),
    I32 { shape: Vec<usize>, data: Vec<i32> },
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version; the checksum is verified by [`Reader::finish`].
    pub fn open(buf: &'a [u8], magic: &[u8; 4], version: u16) -> Result<Self, FormatError> {
        let mut r = Reader { buf, pos: 0 };
        let found: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &found != magic {
            return Err(FormatError::BadMagic { expected: *magic, found });
        }
        let v = r.u16()?;
        if v != version {
            return Err(FormatError::Version { expected: version, found: v });
        }
        Ok(r)
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(FormatError::Truncated { offset: self.buf.len() }),
        }
    }

    pub fn malformed(&self, reason: impl Into<String>) -> FormatError {
        FormatError::Malformed { offset: self.pos, reason: reason.into() }
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn str(&mut self) -> Result<String, FormatError> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| FormatError::Malformed { offset: at, reason: "invalid UTF-8".into() })
    }

    pub fn block(&mut self) -> Result<Block, FormatError> {
        let at = self.pos;
        let dtype = self.u8()?;
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        if dtype == DTYPE_F64 && shape.contains(&0) {
            return Err(FormatError::Malformed { offset: at, reason: "zero extent".into() });
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::Malformed { offset: at, reason: "shape overflows".into() })?;
        match dtype {
            DTYPE_F64 => {
                let bytes = self.take(count.checked_mul(8).ok_or(FormatError::Truncated { offset: self.buf.len() })?)?;
                let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                Ok(Block::F64(Tensor::from_parts(shape, data)))
            }
            DTYPE_I32 => {
                let bytes = self.take(count.checked_mul(4).ok_or(FormatError::Truncated { offset: self.buf.len() })?)?;
                let data = bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4"))).collect();
                Ok(Block::I32 { shape, data })
            }
            other => Err(FormatError::Malformed { offset: at, reason: format!("unknown dtype {other}") }),
        }
    }

    pub fn tensor_f64(&mut self) -> Result<Tensor, FormatError> {
        let at = self.pos;
        match self.block()? {
            Block::F64(t) => Ok(t),
            Block::I32 { .. } => Err(FormatError::Malformed { offset: at, reason: "expected f64 tensor".into() }),
        }
    }

    pub fn tensor_i32(&mut self) -> Result<(Vec<usize>, Vec<i32>), FormatError> {
        let at = self.pos;
        match self.block()? {
            Block::I32 { shape, data } => Ok((shape, data)),
            Block::F64(_) => Err(FormatError::Malformed { offset: at, reason: "expected i32 tensor".into() }),
        }
    }

    /// Reads the trailing CRC32 and requires it to be the last 4 bytes.
    pub fn finish(mut self) -> Result<(), FormatError> {
        let body_end = self.pos;
        let stored = self.u32()?;
        if self.pos != self.buf.len() {
            return Err(FormatError::Malformed { offset: self.pos, reason: "trailing bytes".into() });
        }
        let computed = crc32fast::hash(&self.buf[..body_end]);
        if stored != computed {
            return Err(FormatError::Checksum { stored, computed });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let mut w = Writer::new(b"TEST", 3);
        w.u32(7);
        w.str("hello");
        w.tensor_f64(&Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.0, 0.0]).unwrap());
        w.tensor_i32(&[3], &[1, -1, 9]);
        w.finish()
    }

    #[test]
    fn roundtrip() {
        let bytes = sample();
        let mut r = Reader::open(&bytes, b"TEST", 3).unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.str().unwrap(), "hello");
        assert_eq!(r.tensor_f64().unwrap().data(), &[1.0, -2.5, 3.0, 0.0]);
        assert_eq!(r.tensor_i32().unwrap(), (vec![3], vec![1, -1, 9]));
        r.finish().unwrap();
    }

    #[test]
    fn distinct_failures() {
        let bytes = sample();
        assert!(matches!(Reader::open(&bytes, b"XXXX", 3), Err(FormatError::BadMagic { .. })));
        assert!(matches!(Reader::open(&bytes, b"TEST", 4), Err(FormatError::Version { found: 3, .. })));

        let cut = &bytes[..bytes.len() - 10];
        let mut r = Reader::open(cut, b"TEST", 3).unwrap();
        r.u32().unwrap();
        r.str().unwrap();
        r.tensor_f64().unwrap();
        assert!(matches!(r.tensor_i32(), Err(FormatError::Truncated { .. })));

        let mut flipped = bytes.clone();
        flipped[30] ^= 0x40;
        let mut r = Reader::open(&flipped, b"TEST", 3).unwrap();
        r.u32().unwrap();
        r.str().unwrap();
        r.tensor_f64().unwrap();
        r.tensor_i32().unwrap();
        assert!(matches!(r.finish(), Err(FormatError::Checksum { .. })));
    }
}
