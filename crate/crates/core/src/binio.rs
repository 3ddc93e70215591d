//! Little-endian binary readers/writers for the artifact containers
//! (checkpoints, toy backend sidecars).

use crate::error::{Error, Result};

pub fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn push_f64_slice(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn push_u64_slice(buf: &mut Vec<u8>, vals: &[u64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over a byte slice; every read is bounds-checked and reports
/// corruption instead of panicking.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::corrupt(format!(
                "truncated container: needed {n} bytes for {what}, {} left",
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn read_bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        self.take(n, what)
    }

    pub fn read_u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn read_u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn read_f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(n * 8, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn read_u64_vec(&mut self, n: usize, what: &str) -> Result<Vec<u64>> {
        let b = self.take(n * 8, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn expect_end(&self, what: &str) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::corrupt(format!(
                "{what}: {} unexpected trailing bytes",
                self.remaining()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut buf = Vec::new();
        push_u32(&mut buf, 7);
        push_u64(&mut buf, 99);
        push_f64_slice(&mut buf, &[1.5, -2.25]);
        push_u64_slice(&mut buf, &[3, 4]);
        let mut r = Reader::new(&buf);
        assert_eq!(r.read_u32("a").unwrap(), 7);
        assert_eq!(r.read_u64("b").unwrap(), 99);
        assert_eq!(r.read_f64_vec(2, "c").unwrap(), vec![1.5, -2.25]);
        assert_eq!(r.read_u64_vec(2, "d").unwrap(), vec![3, 4]);
        r.expect_end("container").unwrap();
    }

    #[test]
    fn truncation_is_corruption() {
        let mut buf = Vec::new();
        push_u32(&mut buf, 7);
        let mut r = Reader::new(&buf);
        assert!(matches!(r.read_u64("x"), Err(Error::Corrupt(_))));
    }
}
