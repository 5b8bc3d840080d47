//! MGG1 grid dumps: magic, `u32` height, `u32` width, `u32` channels, then
//! little-endian `f32` values in row-major `[h][w][c]` order.

use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MGG1";

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// `[h][w][c]`.
    pub data: Vec<f32>,
}

impl Grid {
    /// From channel-first `[c × h × w]` values.
    pub fn from_chw(c: usize, h: usize, w: usize, chw: &[f32]) -> Result<Self> {
        if chw.len() != c * h * w {
            return Err(Error::Domain(format!(
                "{} values for a {c}×{h}×{w} grid",
                chw.len()
            )));
        }
        let mut data = vec![0.0; chw.len()];
        for ch in 0..c {
            for k in 0..h * w {
                data[k * c + ch] = chw[ch * h * w + k];
            }
        }
        Ok(Grid { h, w, c, data })
    }

    pub fn at(&self, i: usize, j: usize, ch: usize) -> f32 {
        self.data[(i * self.w + j) * self.c + ch]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for v in [self.h, self.w, self.c] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Parse { line: 0, msg };
        if buf.len() < 16 || &buf[..4] != MAGIC {
            return Err(bad("not an MGG1 grid".into()));
        }
        let u = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as usize;
        let (h, w, c) = (u(4), u(8), u(12));
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| bad("grid extents overflow".into()))?;
        if buf.len() != 16 + 4 * n {
            return Err(bad(format!(
                "expected {} payload bytes, found {}",
                4 * n,
                buf.len() - 16
            )));
        }
        let data = buf[16..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Grid { h, w, c, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.encode())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// One channel as comma-separated rows.
    pub fn channel_csv(&self, ch: usize) -> Result<String> {
        self.check_channel(ch)?;
        let mut s = String::new();
        for i in 0..self.h {
            let row: Vec<String> = (0..self.w).map(|j| self.at(i, j, ch).to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        Ok(s)
    }

    /// One channel min-max scaled to 8-bit gray, row-major.
    pub fn channel_gray(&self, ch: usize) -> Result<Vec<u8>> {
        self.check_channel(ch)?;
        let vals: Vec<f32> = (0..self.h * self.w)
            .map(|k| self.data[k * self.c + ch])
            .collect();
        let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        Ok(vals
            .iter()
            .map(|&v| (((v - lo) / span) * 255.0).round() as u8)
            .collect())
    }

    fn check_channel(&self, ch: usize) -> Result<()> {
        if ch >= self.c {
            return Err(Error::Usage(format!(
                "channel {ch} out of range (grid has {})",
                self.c
            )));
        }
        Ok(())
    }
}
