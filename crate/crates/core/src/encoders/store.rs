//! Binary feature store: externally produced embeddings keyed by string id.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "MMFS"
//! version u32      1
//! dim     u32      width of every vector
//! count   u64      number of records
//! count x { id_len u32, id (UTF-8, id_len bytes), dim x f32 }
//! ```
//!
//! Records are written in ascending id order, so a given map always produces
//! the same bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"MMFS";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureStoreHeader {
    pub magic: [u8; 4],
    pub version: u32,
    pub dim: u32,
    pub count: u64,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("feature store: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("feature store: unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("feature store: vector `{id}` has width {got}, expected {expected}")]
    DimMismatch { id: String, expected: usize, got: usize },
    #[error("feature store: dimension must be positive")]
    ZeroDim,
    #[error("feature store: truncated header")]
    TruncatedHeader,
    #[error("feature store: truncated at record {index}")]
    Truncated { index: u64 },
    #[error("feature store: record {index} id is not UTF-8")]
    InvalidId { index: u64 },
    #[error("feature store: duplicate id `{0}`")]
    DuplicateId(String),
    #[error("feature store: {0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("feature store: non-finite value in `{0}`")]
    NonFinite(String),
    #[error("feature store: {0}")]
    Io(#[from] std::io::Error),
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::BadMagic(_) => "store_bad_magic",
            StoreError::UnsupportedVersion(_) => "store_bad_version",
            StoreError::DimMismatch { .. } => "store_dim_mismatch",
            StoreError::ZeroDim => "store_zero_dim",
            StoreError::TruncatedHeader => "store_truncated_header",
            StoreError::Truncated { .. } => "store_truncated",
            StoreError::InvalidId { .. } => "store_invalid_id",
            StoreError::DuplicateId(_) => "store_duplicate_id",
            StoreError::TrailingBytes(_) => "store_trailing_bytes",
            StoreError::NonFinite(_) => "store_non_finite",
            StoreError::Io(_) => "store_io",
        }
    }
}

/// Serializes `entries` to bytes.
pub fn encode_feature_store(dim: usize, entries: &BTreeMap<String, Vec<f32>>) -> Result<Vec<u8>, StoreError> {
    if dim == 0 {
        return Err(StoreError::ZeroDim);
    }
    let mut out = Vec::with_capacity(HEADER_LEN + entries.len() * (8 + dim * 4));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (id, v) in entries {
        if v.len() != dim {
            return Err(StoreError::DimMismatch { id: id.clone(), expected: dim, got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(StoreError::NonFinite(id.clone()));
        }
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_feature_store(path: &Path, dim: usize, entries: &BTreeMap<String, Vec<f32>>) -> Result<(), StoreError> {
    let bytes = encode_feature_store(dim, entries)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_header(bytes: &[u8]) -> Result<FeatureStoreHeader, StoreError> {
    if bytes.len() < HEADER_LEN {
        // A short file with the wrong magic is still reported as bad magic.
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(StoreError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(StoreError::TruncatedHeader);
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if dim == 0 {
        return Err(StoreError::ZeroDim);
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    Ok(FeatureStoreHeader { magic, version, dim, count })
}

pub fn decode_feature_store(bytes: &[u8]) -> Result<(usize, BTreeMap<String, Vec<f32>>), StoreError> {
    let header = decode_header(bytes)?;
    let dim = header.dim as usize;
    let mut cur = Cursor { buf: bytes, pos: HEADER_LEN };
    let mut out = BTreeMap::new();
    for index in 0..header.count {
        let truncated = || StoreError::Truncated { index };
        let len = cur.u32().ok_or_else(truncated)? as usize;
        let id = cur.take(len).ok_or_else(truncated)?;
        let id = std::str::from_utf8(id).map_err(|_| StoreError::InvalidId { index })?.to_owned();
        let raw = cur.take(dim * 4).ok_or_else(truncated)?;
        let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if out.insert(id.clone(), v).is_some() {
            return Err(StoreError::DuplicateId(id));
        }
    }
    if cur.pos != bytes.len() {
        return Err(StoreError::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok((dim, out))
}

pub fn read_feature_store(path: &Path) -> Result<(usize, BTreeMap<String, Vec<f32>>), StoreError> {
    decode_feature_store(&std::fs::read(path)?)
}

/// In-memory view over one or more stores of the same width.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    entries: BTreeMap<String, Vec<f32>>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: BTreeMap::new() }
    }

    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let (dim, entries) = read_feature_store(path)?;
        Ok(Self { dim, entries })
    }

    /// Opens every path and merges them; later files may not redefine ids.
    pub fn open_all<P: AsRef<Path>>(paths: &[P]) -> Result<Self, StoreError> {
        let mut merged: Option<FeatureStore> = None;
        for p in paths {
            let next = Self::open(p.as_ref())?;
            match merged.as_mut() {
                None => merged = Some(next),
                Some(m) => m.merge(next)?,
            }
        }
        merged.ok_or(StoreError::ZeroDim)
    }

    pub fn merge(&mut self, other: FeatureStore) -> Result<(), StoreError> {
        if other.dim != self.dim {
            let id = other.entries.keys().next().cloned().unwrap_or_default();
            return Err(StoreError::DimMismatch { id, expected: self.dim, got: other.dim });
        }
        for (k, v) in other.entries {
            if self.entries.contains_key(&k) {
                return Err(StoreError::DuplicateId(k));
            }
            self.entries.insert(k, v);
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, v: Vec<f32>) -> Result<(), StoreError> {
        let id = id.into();
        if v.len() != self.dim {
            return Err(StoreError::DimMismatch { id, expected: self.dim, got: v.len() });
        }
        self.entries.insert(id, v);
        Ok(())
    }

    /// Converts from `f64`, rounding to nearest.
    pub fn insert_f64(&mut self, id: impl Into<String>, v: &[f64]) -> Result<(), StoreError> {
        self.insert(id, v.iter().map(|&x| x as f32).collect())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.entries.get(id).map(|v| v.as_slice())
    }

    pub fn get_f64(&self, id: &str) -> Option<Vec<f64>> {
        self.get(id).map(|v| v.iter().map(|&x| x as f64).collect())
    }

    /// Entries whose id starts with `prefix`, in id order.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a [f32])> + 'a {
        self.entries.range(prefix.to_string()..).take_while(move |(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn entries(&self) -> &BTreeMap<String, Vec<f32>> {
        &self.entries
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        write_feature_store(path, self.dim, &self.entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, Vec<f32>> {
        let mut m = BTreeMap::new();
        m.insert("b".to_string(), vec![1.0, -2.5, f32::MIN_POSITIVE]);
        m.insert("a/é".to_string(), vec![0.0, -0.0, 3.25]);
        m
    }

    #[test]
    fn empty_map_is_header_only() {
        let bytes = encode_feature_store(4, &BTreeMap::new()).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        let h = decode_header(&bytes).unwrap();
        assert_eq!((h.dim, h.count), (4, 0));
        assert!(decode_feature_store(&bytes).unwrap().1.is_empty());
    }

    #[test]
    fn layout_is_little_endian_and_sorted() {
        let bytes = encode_feature_store(3, &sample()).unwrap();
        assert_eq!(&bytes[0..4], b"MMFS");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[3, 0, 0, 0]);
        assert_eq!(&bytes[12..20], &[2, 0, 0, 0, 0, 0, 0, 0]);
        // "a/é" sorts first and is 4 bytes of UTF-8
        assert_eq!(&bytes[20..24], &[4, 0, 0, 0]);
        assert_eq!(&bytes[24..28], "a/é".as_bytes());
        assert_eq!(&bytes[36..40], &3.25f32.to_le_bytes());
    }

    #[test]
    fn round_trip_preserves_bits() {
        let m = sample();
        let (dim, back) = decode_feature_store(&encode_feature_store(3, &m).unwrap()).unwrap();
        assert_eq!(dim, 3);
        for (k, v) in &m {
            let got = &back[k];
            assert!(v.iter().zip(got).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn corruptions_have_distinct_codes() {
        let good = encode_feature_store(3, &sample()).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert_eq!(decode_feature_store(&bad_magic).unwrap_err().code(), "store_bad_magic");

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert_eq!(decode_feature_store(&bad_version).unwrap_err().code(), "store_bad_version");

        let truncated = &good[..good.len() - 2];
        match decode_feature_store(truncated).unwrap_err() {
            StoreError::Truncated { index } => assert_eq!(index, 1),
            e => panic!("unexpected {e}"),
        }

        assert_eq!(decode_feature_store(&good[..10]).unwrap_err().code(), "store_truncated_header");

        let mut trailing = good.clone();
        trailing.push(0);
        assert_eq!(decode_feature_store(&trailing).unwrap_err().code(), "store_trailing_bytes");
    }

    #[test]
    fn writer_rejects_ragged_vectors() {
        let mut m = sample();
        m.insert("c".into(), vec![1.0]);
        assert_eq!(encode_feature_store(3, &m).unwrap_err().code(), "store_dim_mismatch");
    }

    #[test]
    fn merge_rejects_duplicates() {
        let mut a = FeatureStore::new(2);
        a.insert("x", vec![1.0, 2.0]).unwrap();
        let mut b = FeatureStore::new(2);
        b.insert("x", vec![3.0, 4.0]).unwrap();
        assert!(matches!(a.merge(b), Err(StoreError::DuplicateId(_))));
    }
}
