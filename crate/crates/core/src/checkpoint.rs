//! Self-describing binary container: JSON header plus named arrays.
//!
//! Layout (little endian): magic `PRSDCKPT`, format version u32, header
//! length u32, header JSON, array count u32, then per array: name length
//! u32, UTF-8 name, dtype tag u8, rank u32, dims u64 × rank, raw values.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"PRSDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ArrayEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Raw little-endian values.
    pub bytes: Vec<u8>,
}

impl ArrayEntry {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Self {
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    pub fn from_slice<T: Scalar>(shape: &[usize], data: &[T]) -> Result<Self> {
        Ok(Self::from_tensor(&Tensor::new(shape.to_vec(), data.to_vec())?))
    }

    /// Decodes to `T`, converting between f32 and f64 if needed.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let size = self.dtype.size();
        let data: Vec<T> = match self.dtype {
            DType::F32 => self
                .bytes
                .chunks_exact(size)
                .map(|c| T::lit(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => self.bytes.chunks_exact(size).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub header: serde_json::Value,
    pub arrays: IndexMap<String, ArrayEntry>,
}

impl Container {
    pub fn array(&self, name: &str) -> Result<&ArrayEntry> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.array(name)?.to_tensor()
    }

    pub fn insert_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.arrays.insert(name.into(), ArrayEntry::from_tensor(t));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(header.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            if a.bytes.len() != a.len() * a.dtype.size() {
                return Err(Error::Checkpoint(format!("array `{name}` has inconsistent length")));
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(a.dtype.tag());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&a.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut r = Reader { b, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let hlen = r.u32()? as usize;
        let header: serde_json::Value = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays = IndexMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint(format!("array name at byte {} is not UTF-8", r.pos)))?
                .to_string();
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("array `{name}`: unknown dtype tag {tag}")))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| Error::Checkpoint(format!("array `{name}`: shape overflow")))?;
            let bytes = r.take(n)?.to_vec();
            if arrays.insert(name.clone(), ArrayEntry { dtype, shape, bytes }).is_some() {
                return Err(Error::Checkpoint(format!("duplicate array `{name}`")));
            }
        }
        if r.pos != b.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last array",
                b.len() - r.pos
            )));
        }
        Ok(Self { header, arrays })
    }

    /// Atomic write through a temporary file in the target directory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.b.len() - self.pos
            )));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
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

    fn sample() -> Container {
        let mut c = Container {
            header: serde_json::json!({"kind": "test", "beta": 0.25, "vocab": ["<pad>", "a"]}),
            arrays: IndexMap::new(),
        };
        c.insert_tensor("w", &Tensor::<f64>::from_fn(vec![2, 3], |i| i as f64 * 0.1));
        c.insert_tensor("b", &Tensor::<f32>::from_fn(vec![3], |i| -(i as f32) / 3.0));
        c
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let w: Tensor<f64> = back.tensor("w").unwrap();
        assert_eq!(w.data()[5], 5.0 * 0.1);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            let err = Container::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Version { expected: 1, found: 7 }));
        assert!(err.to_string().contains("expected 1, found 7"));
    }

    #[test]
    fn corrupt_header_is_reported() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[16] = b'#';
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("corrupt header"), "{err}");
    }

    #[test]
    fn cross_precision_load_converts() {
        let c = sample();
        let b: Tensor<f64> = c.tensor("b").unwrap();
        assert_eq!(b.data()[1], (-1.0f32 / 3.0) as f64);
    }
}
