//! Raw float map dumps.
//!
//! ```text
//! "LMAP"  u32 rank  rank x u32 dims  f32 data (little-endian, row-major)
//! ```
//!
//! Eigenvalue maps are written with rank 2 as `(height, width)`.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LMAP";

#[derive(Clone, Debug, PartialEq)]
pub struct RawMap {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawMap {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, msg: String| Error::InvalidArgument(format!("LMAP at byte {offset}: {msg}"));
        let word = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| err(at, "truncated".into()))
        };
        if bytes.get(..4) != Some(MAGIC.as_slice()) {
            return Err(err(0, "bad magic".into()));
        }
        let rank = word(4)? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for i in 0..rank {
            dims.push(word(8 + 4 * i)? as usize);
        }
        let start = 8 + 4 * rank;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| err(8, "dims overflow".into()))?;
        let expected = n.checked_mul(4).and_then(|b| b.checked_add(start));
        if expected != Some(bytes.len()) {
            return Err(err(
                start,
                format!(
                    "expected {n} values, file has {} data bytes",
                    bytes.len().saturating_sub(start)
                ),
            ));
        }
        let data = bytes[start..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(dims, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
