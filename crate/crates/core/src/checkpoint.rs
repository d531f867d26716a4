//! Versioned container of named `f64` arrays plus a config snapshot.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "RGACKPT\0"  version (1)  epoch
//! config_len   config text (UTF-8, key = value lines)
//! count
//! count x { name_len  name  rows  cols  rows*cols f64 (LE, row-major) }
//! ```
//!
//! Arrays are written in name order, so encoding is a pure function of the
//! contents and `encode(decode(b)) == b`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"RGACKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u32,
    pub config: String,
    pub arrays: BTreeMap<String, Matrix>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let n = self.u32()?;
        let raw = self.take(n)?;
        core::str::from_utf8(raw)
            .map(String::from)
            .map_err(|_| Error::Format(format!("checkpoint {what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize);
        put_u32(&mut out, self.epoch as usize);
        put_u32(&mut out, self.config.len());
        out.extend_from_slice(self.config.as_bytes());
        put_u32(&mut out, self.arrays.len());
        for (name, m) in &self.arrays {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, m.rows());
            put_u32(&mut out, m.cols());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads {VERSION}"
            )));
        }
        let epoch = r.u32()? as u32;
        let config = r.text("config")?;
        let count = r.u32()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name = r.text("array name")?;
            let rows = r.u32()?;
            let cols = r.u32()?;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Format(format!("array `{name}` size overflow")))?;
            let data = r
                .take(n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if arrays.insert(name.clone(), Matrix::from_vec(rows, cols, data)?).is_some() {
                return Err(Error::Format(format!("array `{name}` appears twice")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after the last array".into()));
        }
        Ok(Self {
            epoch,
            config,
            arrays,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn round_trip_is_byte_exact() {
        let mut arrays = BTreeMap::new();
        arrays.insert(String::from("b"), Matrix::from_vec(1, 2, vec![-0.0, f64::MIN_POSITIVE]).unwrap());
        arrays.insert(String::from("a"), Matrix::from_vec(2, 1, vec![1.5, 1e300]).unwrap());
        let c = Checkpoint {
            epoch: 7,
            config: String::from("seed = 3\n"),
            arrays,
        };
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.epoch, 7);
    }

    #[test]
    fn version_and_truncation_are_checked() {
        let c = Checkpoint {
            epoch: 0,
            config: String::new(),
            arrays: BTreeMap::new(),
        };
        let mut bytes = c.encode();
        assert!(Checkpoint::decode(&bytes[..10]).is_err());
        bytes[8] = 2;
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Format(m)) if m.contains("version 2")));
    }
}
