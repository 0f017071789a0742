//! The `ELIPW01` weight file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      7 bytes   "ELIPW01"
//! count      u32       number of entries
//! entry*     name_len u16, name (utf-8), rank u8, dims u32 × rank,
//!            payload f32 × product(dims), row-major
//! ```
//!
//! Names are unique and the file ends exactly after the last payload.
//! Compute happens in `f64`; [`WeightSet::insert_f64`] narrows with
//! round-to-nearest-even and readers widen exactly.

use std::collections::HashMap;

use thiserror::Error;

use crate::tensor::FeatureMatrix;

pub const MAGIC: &[u8; 7] = b"ELIPW01";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WeightFileError {
    #[error("bad magic, expected ELIPW01")]
    BadMagic,
    #[error("truncated while reading {0}")]
    Truncated(&'static str),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("dimensions of `{0}` overflow")]
    DimOverflow(String),
    #[error("tensor name is not valid utf-8")]
    InvalidName,
    #[error("{0} trailing bytes after last entry")]
    TrailingBytes(usize),
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has dims {found:?}, expected {expected:?}")]
    WrongDims {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("cannot encode `{0}`: {1}")]
    Unencodable(String, &'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered collection of uniquely named `f32` tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightSet {
    entries: Vec<NamedTensor>,
    index: HashMap<String, usize>,
}

impl WeightSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    pub fn insert(&mut self, tensor: NamedTensor) -> Result<(), WeightFileError> {
        if self.index.contains_key(&tensor.name) {
            return Err(WeightFileError::DuplicateName(tensor.name));
        }
        let expected = checked_len(&tensor.dims).ok_or_else(|| WeightFileError::DimOverflow(tensor.name.clone()))?;
        if expected != tensor.data.len() {
            return Err(WeightFileError::WrongDims {
                name: tensor.name,
                expected: tensor.dims,
                found: vec![tensor.data.len()],
            });
        }
        self.index.insert(tensor.name.clone(), self.entries.len());
        self.entries.push(tensor);
        Ok(())
    }

    /// Narrows `values` to `f32` and stores them under `name`.
    pub fn insert_f64(&mut self, name: impl Into<String>, dims: Vec<usize>, values: &[f64]) -> Result<(), WeightFileError> {
        self.insert(NamedTensor {
            name: name.into(),
            dims,
            data: values.iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &FeatureMatrix) -> Result<(), WeightFileError> {
        self.insert_f64(name, vec![m.rows(), m.cols()], m.data())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    fn require(&self, name: &str, dims: &[usize]) -> Result<&NamedTensor, WeightFileError> {
        let t = self.get(name).ok_or_else(|| WeightFileError::Missing(name.to_string()))?;
        if t.dims != dims {
            return Err(WeightFileError::WrongDims {
                name: name.to_string(),
                expected: dims.to_vec(),
                found: t.dims.clone(),
            });
        }
        Ok(t)
    }

    /// Widened copy of a rank-2 tensor with the expected shape.
    pub fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<FeatureMatrix, WeightFileError> {
        let t = self.require(name, &[rows, cols])?;
        FeatureMatrix::new(rows, cols, t.data.iter().map(|&v| v as f64).collect())
            .map_err(|_| WeightFileError::WrongDims {
                name: name.to_string(),
                expected: vec![rows, cols],
                found: t.dims.clone(),
            })
    }

    /// Widened copy of a rank-1 tensor with the expected length.
    pub fn vector(&self, name: &str, len: usize) -> Result<Vec<f64>, WeightFileError> {
        let t = self.require(name, &[len])?;
        Ok(t.data.iter().map(|&v| v as f64).collect())
    }
}

fn checked_len(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Serializes `weights` in entry order.
pub fn save_weights(weights: &WeightSet) -> Result<Vec<u8>, WeightFileError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(weights.len()).map_err(|_| WeightFileError::Unencodable("<file>".into(), "too many entries"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in &weights.entries {
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| WeightFileError::Unencodable(t.name.clone(), "name longer than 65535 bytes"))?;
        let rank = u8::try_from(t.dims.len()).map_err(|_| WeightFileError::Unencodable(t.name.clone(), "rank above 255"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &d in &t.dims {
            let d = u32::try_from(d).map_err(|_| WeightFileError::Unencodable(t.name.clone(), "dimension above u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], WeightFileError> {
        let end = self.pos.checked_add(n).ok_or(WeightFileError::Truncated(what))?;
        let slice = self.bytes.get(self.pos..end).ok_or(WeightFileError::Truncated(what))?;
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, WeightFileError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, WeightFileError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_weights(bytes: &[u8]) -> Result<WeightSet, WeightFileError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic").map_err(|_| WeightFileError::BadMagic)?;
    if magic != MAGIC {
        return Err(WeightFileError::BadMagic);
    }
    let count = r.u32("entry count")?;
    let mut set = WeightSet::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| WeightFileError::InvalidName)?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let payload_bytes = checked_len(&dims)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| WeightFileError::DimOverflow(name.clone()))?;
        if set.get(&name).is_some() {
            return Err(WeightFileError::DuplicateName(name));
        }
        let payload = r.take(payload_bytes, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        set.insert(NamedTensor { name, dims, data })?;
    }
    if r.pos != bytes.len() {
        return Err(WeightFileError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> WeightSet {
        let mut w = WeightSet::new();
        w.insert_f64("a.weight", vec![2, 3], &[1.0, -2.0, 0.5, 3.25, 0.0, -0.0]).unwrap();
        w.insert_f64("a.bias", vec![3], &[0.1, 0.2, 0.3]).unwrap();
        w.insert_f64("scalar", vec![], &[7.0]).unwrap();
        w
    }

    #[test]
    fn empty_set_is_eleven_bytes() {
        let bytes = save_weights(&WeightSet::new()).unwrap();
        assert_eq!(bytes.len(), 11);
        assert_eq!(&bytes[..7], b"ELIPW01");
        assert_eq!(&bytes[7..], &[0, 0, 0, 0]);
        assert!(load_weights(&bytes).unwrap().is_empty());
    }

    #[test]
    fn entry_layout_is_bit_exact() {
        let mut w = WeightSet::new();
        w.insert_f64("w", vec![2], &[1.0, -2.0]).unwrap();
        let bytes = save_weights(&w).unwrap();
        let mut want = b"ELIPW01".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u16.to_le_bytes());
        want.push(b'w');
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn flipped_magic() {
        let mut bytes = save_weights(&sample()).unwrap();
        bytes[0] ^= 0x01;
        assert_eq!(load_weights(&bytes), Err(WeightFileError::BadMagic));
        assert_eq!(load_weights(b"ELI"), Err(WeightFileError::BadMagic));
    }

    #[test]
    fn truncation_is_detected_everywhere() {
        let bytes = save_weights(&sample()).unwrap();
        for cut in 7..bytes.len() {
            assert!(
                matches!(load_weights(&bytes[..cut]), Err(WeightFileError::Truncated(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = save_weights(&sample()).unwrap();
        bytes.push(0);
        assert_eq!(load_weights(&bytes), Err(WeightFileError::TrailingBytes(1)));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut bytes = b"ELIPW01".to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for _ in 0..2 {
            bytes.extend_from_slice(&1u16.to_le_bytes());
            bytes.push(b'x');
            bytes.push(0);
            bytes.extend_from_slice(&1.5f32.to_le_bytes());
        }
        assert_eq!(load_weights(&bytes), Err(WeightFileError::DuplicateName("x".into())));
        let mut w = sample();
        assert!(matches!(w.insert_f64("scalar", vec![], &[1.0]), Err(WeightFileError::DuplicateName(_))));
    }

    #[test]
    fn dim_overflow_rejected() {
        let mut bytes = b"ELIPW01".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'x');
        bytes.push(4);
        for _ in 0..4 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert_eq!(load_weights(&bytes), Err(WeightFileError::DimOverflow("x".into())));
    }

    #[test]
    fn narrowing_rounds_to_nearest_even() {
        // Halfway between 1.0 and the next f32 up: ties to the even mantissa.
        let halfway = 1.0 + f32::EPSILON as f64 / 2.0;
        let mut w = WeightSet::new();
        w.insert_f64("h", vec![1], &[halfway]).unwrap();
        assert_eq!(w.get("h").unwrap().data[0], 1.0f32);
    }

    proptest! {
        #[test]
        fn save_load_round_trip(
            tensors in prop::collection::vec(
                (prop::collection::vec(1usize..4, 0..3), any::<u32>()),
                0..6,
            )
        ) {
            let mut w = WeightSet::new();
            for (i, (dims, seed)) in tensors.iter().enumerate() {
                let n: usize = dims.iter().product();
                let data = (0..n).map(|k| f32::from_bits(seed.wrapping_add(k as u32 * 7919) & 0x7f7f_ffff)).collect();
                w.insert(NamedTensor { name: format!("t{i}.ü"), dims: dims.clone(), data }).unwrap();
            }
            let bytes = save_weights(&w).unwrap();
            let back = load_weights(&bytes).unwrap();
            prop_assert_eq!(save_weights(&back).unwrap(), bytes);
            prop_assert_eq!(back, w);
        }
    }
}
