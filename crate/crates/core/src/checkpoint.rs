//! Flat binary container for named parameter arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "THCKPT01"
//! meta_len   u32      length of the metadata block
//! meta       bytes    UTF-8 `key = value` lines (model configuration)
//! count      u32      number of entries
//! entries    count × { name_len u32, name bytes, trainable u8,
//!                      ndim u32, dims u32 × ndim }
//! data       for each entry in header order: product(dims) × f32
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::NdArray;

const MAGIC: &[u8; 8] = b"THCKPT01";

/// Parameters plus the configuration needed to rebuild the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: KeyValues,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Values are rounded to `f32` so that save/load is lossless.
    pub fn new(meta: KeyValues, mut params: ParamStore) -> Self {
        params.quantize_f32();
        Self { meta, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let meta = self.meta.to_text();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.trainable as u8);
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for (_, p) in self.params.iter() {
            for &v in p.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(8)? != MAGIC {
            return Err(Error::format(origin, "bad checkpoint magic"));
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::format(origin, "metadata is not UTF-8"))?;
        let meta = KeyValues::parse(meta_text).map_err(|e| Error::format(origin, e.to_string()))?;
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let nl = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nl)?)
                .map_err(|_| Error::format(origin, "entry name is not UTF-8"))?
                .to_string();
            let trainable = r.take(1)?[0] != 0;
            let ndim = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            headers.push((name, trainable, dims));
        }
        let mut params = ParamStore::new();
        for (name, trainable, dims) in headers {
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            params.insert(name, NdArray::new(dims, data)?, trainable);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes after checkpoint data"));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Entry names grouped by their first path component, for diagnostics.
    pub fn summary(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, p) in self.params.iter() {
            let head = name.split('/').next().unwrap_or(name).to_string();
            *out.entry(head).or_insert(0) += p.value.len();
        }
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.origin, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut store = ParamStore::new();
        store.insert("a/w", NdArray::matrix(2, 2, vec![0.1, -2.0, 3.5, 1e-3]).unwrap(), true);
        store.insert("b", NdArray::vector(vec![7.0]), false);
        let mut meta = KeyValues::default();
        meta.set("sh_degree", 1);
        let ck = Checkpoint::new(meta, store);
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert!(!back.params.is_trainable("b"));
    }

    #[test]
    fn truncated_is_rejected() {
        let ck = Checkpoint::new(KeyValues::default(), ParamStore::new());
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT\0\0\0\0", Path::new("x")).is_err());
    }
}
