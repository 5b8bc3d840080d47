//! MGT1 checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MGT1" | u32 count | count × { u32 name_len | name (UTF-8) | u8 rank | rank × u32 extent | f32 payload }
//! ```
//!
//! Entries are written in lexicographic name order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"MGT1";

pub fn encode(entries: &BTreeMap<String, Tensor<f32>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(TensorError::Checkpoint(format!(
                "truncated at byte {} while reading {}",
                self.pos, what
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic, expected MGT1".into()));
    }
    let count = c.u32("entry count")?;
    let mut out = BTreeMap::new();
    for i in 0..count {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| TensorError::Checkpoint(format!("entry {} name is not UTF-8", i)))?
            .to_string();
        let rank = c.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("extent")? as usize);
        }
        let n = numel(&shape);
        let bytes = c.take(
            n.checked_mul(4)
                .ok_or_else(|| TensorError::Checkpoint("extent overflow".into()))?,
            &name,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if out
            .insert(name.clone(), Tensor::new(shape, data)?)
            .is_some()
        {
            return Err(TensorError::Checkpoint(format!(
                "duplicate entry `{}`",
                name
            )));
        }
    }
    if c.pos != buf.len() {
        return Err(TensorError::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - c.pos
        )));
    }
    Ok(out)
}

pub fn write(path: &Path, entries: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(entries))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, Tensor<f32>> {
        let mut m = BTreeMap::new();
        m.insert(
            "b/w".into(),
            Tensor::new(
                vec![2, 3],
                vec![1.0, -2.5, 3.0, 0.0, f32::MIN_POSITIVE, 7.0],
            )
            .unwrap(),
        );
        m.insert("a".into(), Tensor::scalar(0.125));
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = sample();
        let bytes = encode(&m);
        assert_eq!(&bytes[..4], b"MGT1");
        assert_eq!(decode(&bytes).unwrap(), m);
        assert_eq!(encode(&decode(&bytes).unwrap()), bytes);
    }

    #[test]
    fn layout_of_scalar_entry() {
        let mut m = BTreeMap::new();
        m.insert("x".to_string(), Tensor::scalar(1.0f32));
        let b = encode(&m);
        let mut expect = b"MGT1".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.push(b'x');
        expect.push(0);
        expect.extend(1.0f32.to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = encode(&sample());
        for cut in [0, 3, 7, 12, bytes.len() - 1] {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, TensorError::Checkpoint(ref s) if s.contains("truncated") || s.contains("magic")),
                "{cut}: {err}"
            );
        }
    }
}
