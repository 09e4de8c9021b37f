//! The `PMTS` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PMTS"  u32 version=1  u32 count
//! count × { u16 name_len, name (UTF-8), u8 dtype (0=f32, 1=f64),
//!           u8 ndim, ndim × u32 dim, raw payload }
//! ```
//!
//! Backbone, adapter, regressor and prepared-dataset files all use it;
//! tensor names carry a section prefix (`backbone.`, `peft.`, `meta.`,
//! `head.`, `data.`).

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PMTS";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a PMTS file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported PMTS version {0}")]
    Version(u32),
    #[error("truncated PMTS file while reading {0}")]
    Truncated(String),
    #[error("unknown dtype code {code} for tensor {name}")]
    Dtype { name: String, code: u8 },
    #[error("tensor name is not valid UTF-8")]
    Name,
    #[error("{0} trailing bytes after last tensor")]
    Trailing(usize),
    #[error("tensor {name}: expected shape {expected:?}, file has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0} missing from checkpoint")]
    Missing(String),
    #[error("checkpoint holds unexpected tensor {0}")]
    Unexpected(String),
    #[error("duplicate tensor {0}")]
    Duplicate(String),
}

/// Serializes named tensors. Names must be shorter than 64 KiB.
pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>, dtype: Dtype) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name = name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(dtype as u8);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match dtype {
            Dtype::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            Dtype::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a PMTS buffer into `(name, tensor)` pairs in file order.
pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32("tensor count")? as usize;
    let mut out: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let ctx = format!("tensor {i}");
        let len = r.u16(&ctx)? as usize;
        let name = std::str::from_utf8(r.take(len, &ctx)?)
            .map_err(|_| CheckpointError::Name)?
            .to_string();
        let code = r.u8(&name)?;
        let width = match code {
            0 => 4,
            1 => 8,
            _ => return Err(CheckpointError::Dtype { name, code }),
        };
        let ndim = r.u8(&name)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32(&name)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(width).ok_or_else(|| CheckpointError::Truncated(name.clone()))?, &name)?;
        let data: Vec<f64> = if width == 4 {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        };
        if out.iter().any(|(n, _)| *n == name) {
            return Err(CheckpointError::Duplicate(name));
        }
        out.push((name, Tensor::new(shape, data).expect("element count matches shape")));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn save<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>, dtype: Dtype) -> Result<()> {
    std::fs::write(path, encode(tensors, dtype)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a.w".into(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, -0.0, 1e-300]).unwrap()),
            ("b".into(), Tensor::scalar(7.0)),
        ]
    }

    fn enc(v: &[(String, Tensor)]) -> Vec<u8> {
        encode(v.iter().map(|(n, t)| (n.as_str(), t)), Dtype::F64)
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = enc(&sample());
        assert_eq!(&bytes[..4], b"PMTS");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &3u16.to_le_bytes());
        assert_eq!(&bytes[14..17], b"a.w");
        assert_eq!(bytes[17], 1);
        assert_eq!(bytes[18], 2);
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let v = sample();
        let bytes = enc(&v);
        let back = decode(&bytes).unwrap();
        for ((n0, t0), (n1, t1)) in v.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert!(t0.bitwise_eq(t1));
        }
        assert_eq!(enc(&back), bytes);
    }

    #[test]
    fn f32_payload_decodes() {
        let t = Tensor::from_vec(vec![0.5, -1.25]);
        let bytes = encode([("x", &t)], Dtype::F32);
        let back = decode(&bytes).unwrap();
        assert_eq!(back[0].1.data(), &[0.5, -1.25]);
    }

    #[test]
    fn corrupted_files_are_rejected_distinctly() {
        let mut bytes = enc(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic(_))));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert_eq!(decode(&bad), Err(CheckpointError::Version(2)));

        let cut = bytes.len() - 3;
        assert!(matches!(decode(&bytes[..cut]), Err(CheckpointError::Truncated(_))));

        bytes.push(0);
        assert_eq!(decode(&bytes), Err(CheckpointError::Trailing(1)));
    }
}
