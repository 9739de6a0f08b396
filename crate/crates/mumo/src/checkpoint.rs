//! Binary checkpoints.
//!
//! Layout, all integers little-endian: `b"MUMO"`, version `u32`, entry count
//! `u64`; then per entry: name length `u64`, UTF-8 name, rank `u64`, each
//! dim `u64`, and `prod(dims)` `f32` values. The whole file is validated
//! before any tensor is built.

use std::path::Path;

use mumo_core::model::ParamStore;
use mumo_core::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MUMO";
pub const VERSION: u32 = 1;

#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint does not start with MUMO")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("entry name at byte {0} is not UTF-8")]
    BadName(usize),
    #[error("entry at byte {0} has an impossible shape")]
    BadShape(usize),
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub fn encode<T: Scalar>(params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.entries() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_f32().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        let at = self.pos;
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::BadShape(at))
    }
}

struct EntryView<'a> {
    name: &'a str,
    shape: Vec<usize>,
    data: &'a [u8],
}

fn scan(bytes: &[u8]) -> Result<Vec<EntryView<'_>>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.len()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| CheckpointError::BadName(at))?;
        let rank = r.len()?;
        if rank > 8 {
            return Err(CheckpointError::BadShape(at));
        }
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or(CheckpointError::BadShape(at))?;
        let data = r.take(n)?;
        entries.push(EntryView { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(entries)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>, CheckpointError> {
    let entries = scan(bytes)?;
    Ok(ParamStore::from_entries(
        entries
            .into_iter()
            .map(|e| {
                let data = e
                    .data
                    .chunks_exact(4)
                    .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect();
                (e.name.to_string(), Tensor::from_vec(e.shape, data))
            })
            .collect(),
    ))
}

pub fn save<T: Scalar>(path: &Path, params: &ParamStore<T>) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(params)).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParamStore<T>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        ParamStore::from_entries(vec![
            ("a.w".into(), Tensor::from_vec(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0])),
            ("b".into(), Tensor::from_vec(vec![1], vec![0.1])),
        ])
    }

    #[test]
    fn header_layout() {
        let b = encode(&store());
        assert_eq!(&b[..4], b"MUMO");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 3);
        assert_eq!(&b[24..27], b"a.w");
        let expected = 16 + (8 + 3 + 8 + 16 + 24) + (8 + 1 + 8 + 8 + 4);
        assert_eq!(b.len(), expected);
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let b = encode(&store());
        let back: ParamStore<f32> = decode(&b).unwrap();
        assert_eq!(back, store());
        assert_eq!(encode(&back), b);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let b = encode(&store());
        for cut in 0..b.len() {
            assert!(decode::<f32>(&b[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = b.clone();
        extra.push(0);
        assert_eq!(decode::<f32>(&extra), Err(CheckpointError::TrailingBytes(1)));
    }

    #[test]
    fn corrupt_headers() {
        let mut b = encode(&store());
        b[0] = b'X';
        assert_eq!(decode::<f32>(&b), Err(CheckpointError::BadMagic));
        let mut b = encode(&store());
        b[4] = 9;
        assert_eq!(decode::<f32>(&b), Err(CheckpointError::UnsupportedVersion(9)));
        let mut b = encode(&store());
        b[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode::<f32>(&b).is_err());
    }
}
