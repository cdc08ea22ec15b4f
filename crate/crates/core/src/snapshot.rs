//! Flat binary container shared by model, EMA, buffer, and checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  b"IMXS"
//! version    u32      1
//! config     u64      hash of the resolved configuration
//! precision  u8       4 (f32) or 8 (f64): byte width of every stored value
//! count      u32      number of entries
//! entries:
//!   name_len u32, name (utf-8),
//!   rank     u32, extents (u64 each),
//!   values   product(extents) * precision bytes
//! ```
//!
//! Integers that must survive either precision (labels, counters, random
//! generator positions) are stored through [`Container::put_u64s`], which
//! splits each value into four 16-bit limbs; every limb is exactly
//! representable in `f32`.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::real::Precision;
use crate::tensor::Tensor;

/// Stable 64-bit digest of a serializable configuration (first eight bytes of
/// the SHA-256 of its compact JSON form).
pub fn config_hash<S: Serialize + ?Sized>(value: &S) -> u64 {
    let json = serde_json::to_vec(value).expect("configuration serializes");
    let digest = Sha256::digest(&json);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

const MAGIC: &[u8; 4] = b"IMXS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config_hash: u64,
    pub precision: Precision,
    entries: Vec<(String, Tensor<f64>)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Snapshot(msg.into())
}

impl Container {
    pub fn new(config_hash: u64, precision: Precision) -> Self {
        Self {
            config_hash,
            precision,
            entries: Vec::new(),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn put(&mut self, name: impl Into<String>, tensor: Tensor<f64>) {
        let name = name.into();
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f64>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| bad(format!("missing entry {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn put_u64s(&mut self, name: impl Into<String>, values: &[u64]) {
        let rows = values.len().max(1);
        let mut data = Vec::with_capacity(rows * 4);
        for &v in values {
            for limb in 0..4 {
                data.push(((v >> (16 * limb)) & 0xffff) as f64);
            }
        }
        let tensor = if values.is_empty() {
            // an empty list is encoded as one row of out-of-range limbs
            Tensor::full(1, 4, f64::from(u16::MAX) + 1.0)
        } else {
            Tensor::matrix(rows, 4, data).expect("limb layout")
        };
        self.put(name, tensor);
    }

    pub fn get_u64s(&self, name: &str) -> Result<Vec<u64>> {
        let t = self.get(name)?;
        if t.cols() != 4 {
            return Err(bad(format!("{name:?} is not an integer entry")));
        }
        if t.data().iter().all(|&v| v == f64::from(u16::MAX) + 1.0) {
            return Ok(Vec::new());
        }
        (0..t.rows())
            .map(|r| {
                t.row(r).iter().enumerate().try_fold(0u64, |acc, (limb, &v)| {
                    if !(0.0..=65535.0).contains(&v) || v.fract() != 0.0 {
                        return Err(bad(format!("{name:?} holds a non-integer limb {v}")));
                    }
                    Ok(acc | ((v as u64) << (16 * limb)))
                })
            })
            .collect()
    }

    pub fn put_u64(&mut self, name: impl Into<String>, value: u64) {
        self.put_u64s(name, &[value]);
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        self.get_u64s(name)?
            .first()
            .copied()
            .ok_or_else(|| bad(format!("{name:?} is empty")))
    }

    pub fn put_rng(&mut self, name: &str, rng: &ChaCha8Rng) {
        let seed = rng.get_seed();
        let mut words: Vec<u64> = seed
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        words.push(rng.get_stream());
        let pos = rng.get_word_pos();
        words.push(pos as u64);
        words.push((pos >> 64) as u64);
        self.put_u64s(name, &words);
    }

    pub fn get_rng(&self, name: &str) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let words = self.get_u64s(name)?;
        if words.len() != 7 {
            return Err(bad(format!("{name:?} is not a generator state")));
        }
        let mut seed = [0u8; 32];
        for (chunk, w) in seed.chunks_exact_mut(8).zip(&words[..4]) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(words[4]);
        rng.set_word_pos(u128::from(words[5]) | (u128::from(words[6]) << 64));
        Ok(rng)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.push(self.precision.byte_width() as u8);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                match self.precision {
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let config_hash = cur.u64()?;
        let precision = match cur.take(1)?[0] {
            4 => Precision::F32,
            8 => Precision::F64,
            w => return Err(bad(format!("unsupported value width {w}"))),
        };
        let count = cur.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| bad("entry name is not utf-8"))?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad("extent overflow"))?;
            let raw = cur.take(n.checked_mul(precision.byte_width()).ok_or_else(|| bad("size overflow"))?)?;
            let data = match precision {
                Precision::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Precision::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            let tensor = Tensor::new(shape, data).map_err(|e| bad(format!("{name:?}: {e}")))?;
            entries.push((name, tensor));
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            config_hash,
            precision,
            entries,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut c = Container::new(0xdead_beef, Precision::F64);
        c.put("w", Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap());
        let b = c.to_bytes();
        assert_eq!(&b[0..4], b"IMXS");
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 0xdead_beef);
        assert_eq!(b[16], 8);
        assert_eq!(u32::from_le_bytes(b[17..21].try_into().unwrap()), 1);
        // name_len + name + rank + 2 extents + 2 values
        assert_eq!(b.len(), 21 + 4 + 1 + 4 + 16 + 16);
        assert_eq!(Container::from_bytes(&b).unwrap(), c);
    }

    #[test]
    fn truncated_input_rejected() {
        let mut c = Container::new(1, Precision::F32);
        c.put("x", Tensor::scalar(1.5));
        let b = c.to_bytes();
        assert!(Container::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(Container::from_bytes(b"nope").is_err());
    }

    #[test]
    fn generator_state_resumes_exactly() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        rng.set_stream(3);
        for _ in 0..17 {
            rng.random::<u32>();
        }
        let mut c = Container::new(0, Precision::F32);
        c.put_rng("rng", &rng);
        let mut back = Container::from_bytes(&c.to_bytes()).unwrap().get_rng("rng").unwrap();
        for _ in 0..50 {
            assert_eq!(rng.random::<u64>(), back.random::<u64>());
        }
    }

    #[test]
    fn hash_is_stable_for_equal_values() {
        assert_eq!(config_hash(&[1, 2, 3]), config_hash(&vec![1, 2, 3]));
        assert_ne!(config_hash(&[1, 2, 3]), config_hash(&[1, 2, 4]));
    }

    #[test]
    fn empty_integer_list() {
        let mut c = Container::new(0, Precision::F32);
        c.put_u64s("none", &[]);
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert!(back.get_u64s("none").unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn integers_survive_single_precision(values in proptest::collection::vec(any::<u64>(), 1..20)) {
            let mut c = Container::new(7, Precision::F32);
            c.put_u64s("ints", &values);
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back.get_u64s("ints").unwrap(), values);
        }

        #[test]
        fn values_roundtrip(data in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let n = data.len();
            let mut c = Container::new(3, Precision::F64);
            c.put("v", Tensor::matrix(1, n, data).unwrap());
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
