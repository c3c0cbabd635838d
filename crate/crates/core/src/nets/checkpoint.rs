//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "OSVSRCK\0"
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 `key=value` lines
//! n_records  u32
//! record     name_len u32, name bytes, ndim u32, ndim x u64 dims,
//!            prod(dims) x f32 values (row-major)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::nn::Module;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OSVSRCK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::checkpoint(key, "missing metadata key"))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.meta(key)?.parse().map_err(|e| Error::checkpoint(key, e))
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.records.push((name.into(), t.detach()));
    }

    /// Records whose name starts with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.records.iter().filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone()))).collect()
    }

    /// Appends every parameter of `m` under its full name.
    pub fn push_module(&mut self, m: &impl Module) {
        for p in m.params() {
            self.push(p.name(), &p.var().as_tensor().clone());
        }
    }

    /// Overwrites every parameter of `m` from the record of the same name.
    pub fn load_module(&self, m: &mut impl Module) -> Result<()> {
        let index: BTreeMap<&str, &Tensor> = self.records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err = None;
        m.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            let res = match index.get(p.name()) {
                None => Err(Error::checkpoint(p.name(), "missing parameter record")),
                Some(t) if t.dims() != p.var().dims() => {
                    Err(Error::checkpoint(p.name(), format!("shape {:?} does not match model shape {:?}", t.dims(), p.var().dims())))
                }
                Some(t) => t.to_dtype(p.var().dtype()).map_err(Error::from).and_then(|t| p.set(&t)),
            };
            if let Err(e) = res {
                err = Some(e);
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::checkpoint(k.clone(), "metadata keys/values must be single-line, keys without `=`"));
            }
            meta.push_str(&format!("{k}={v}\n"));
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for d in t.dims() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::checkpoint("magic", "not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::checkpoint("version", format!("expected {VERSION}, found {version}")));
        }
        let meta_len = r.u32("meta_len")? as usize;
        let text = std::str::from_utf8(r.take(meta_len, "meta")?).map_err(|e| Error::checkpoint("meta", e))?;
        let mut meta = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::checkpoint("meta", format!("bad line `{line}`")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let n = r.u32("n_records")? as usize;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32("record name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "record name")?).map_err(|e| Error::checkpoint("record name", e))?.to_string();
            let ndim = r.u32(&name)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64(&name)? as usize);
            }
            let count: usize = dims.iter().product();
            let raw = r.take(count * 4, &name)?;
            let vals: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            records.push((name, Tensor::from_vec(vals, dims, &Device::Cpu)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::checkpoint("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { meta, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::checkpoint(field, "file truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        let b = self.take(8, field)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_meta("upscale", 4);
        c.push("a.weight", &Tensor::new(&[[1.5f32, -2.0], [0.25, 3.0]], &Device::Cpu).unwrap());
        c.push("scalar", &Tensor::new(&[7.0f32], &Device::Cpu).unwrap());
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.records.len(), 2);
        assert_eq!(back.records[0].1.to_vec2::<f32>().unwrap(), vec![vec![1.5, -2.0], vec![0.25, 3.0]]);
    }

    #[test]
    fn truncation_and_version_are_named() {
        let bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
        let mut bad = bytes.clone();
        bad[8] = 9;
        let err = Checkpoint::from_bytes(&bad).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
