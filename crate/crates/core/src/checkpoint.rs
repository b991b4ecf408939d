//! ASAC checkpoint container.
//!
//! ```text
//! bytes 0-3   magic "ASAC"
//! byte  4     version (0x01)
//! u32 LE      config length, then that many bytes of UTF-8 JSON
//! records:    u32 LE name length, name bytes (UTF-8),
//!             u32 LE rank, rank × u32 LE dims,
//!             product(dims) × f64 LE payload
//! terminator: a zero-length name
//! ```
//!
//! Record names are `param/<name>`, `opt.m/<name>`, `opt.v/<name>` and
//! `sgd.vel/<name>` for tensors, plus `meta/step` and `rng/seed` scalars.
//! The seed is stored bit-for-bit via `f64::from_bits`.

use std::fs;
use std::path::Path;

use crate::error::{contract, AsaError, Result};
use crate::params::ParamStore;

pub const ASAC_MAGIC: &[u8; 4] = b"ASAC";
pub const ASAC_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config_json: String,
    pub records: Vec<Record>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(AsaError::Corrupt(format!("truncated while reading {what} at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| AsaError::Corrupt(format!("{what} is not UTF-8")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn new(config_json: impl Into<String>) -> Self {
        Self { config_json: config_json.into(), records: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(contract("record names must be non-empty"));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(contract(format!("record {name}: shape {shape:?} does not match {} values", data.len())));
        }
        if self.get(&name).is_some() {
            return Err(contract(format!("duplicate record {name}")));
        }
        self.records.push(Record { name, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    fn require(&self, name: &str) -> Result<&Record> {
        self.get(name).ok_or_else(|| AsaError::Corrupt(format!("checkpoint has no record {name}")))
    }

    /// Stores every parameter as `<prefix>/<name>`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for p in store.iter() {
            self.push(format!("{prefix}/{}", p.name), p.tensor.shape.clone(), p.tensor.data.clone())?;
        }
        Ok(())
    }

    /// Stores per-parameter buffers (optimizer moments) shaped like `store`.
    pub fn push_buffers(&mut self, prefix: &str, store: &ParamStore, bufs: &[Vec<f64>]) -> Result<()> {
        if bufs.len() != store.len() {
            return Err(contract("buffer count differs from parameter count"));
        }
        for (p, b) in store.iter().zip(bufs) {
            self.push(format!("{prefix}/{}", p.name), p.tensor.shape.clone(), b.clone())?;
        }
        Ok(())
    }

    pub fn push_u64(&mut self, name: &str, v: u64) -> Result<()> {
        self.push(name, vec![1], vec![f64::from_bits(v)])
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let r = self.require(name)?;
        if r.data.len() != 1 {
            return Err(AsaError::Corrupt(format!("{name} is not a scalar")));
        }
        Ok(r.data[0].to_bits())
    }

    /// Overwrites every parameter of `store` whose name starts with `filter`
    /// from `<prefix>/<name>`. Returns the number loaded.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore, filter: &str) -> Result<usize> {
        let mut n = 0;
        for p in store.iter_mut().filter(|p| p.name.starts_with(filter)) {
            let r = self.require(&format!("{prefix}/{}", p.name))?;
            if r.shape != p.tensor.shape {
                return Err(contract(format!(
                    "record {} has shape {:?}, model expects {:?}",
                    r.name, r.shape, p.tensor.shape
                )));
            }
            p.tensor.data.clone_from(&r.data);
            n += 1;
        }
        Ok(n)
    }

    pub fn load_buffers(&self, prefix: &str, store: &ParamStore) -> Result<Vec<Vec<f64>>> {
        store
            .iter()
            .map(|p| {
                let r = self.require(&format!("{prefix}/{}", p.name))?;
                if r.data.len() != p.tensor.numel() {
                    return Err(AsaError::Corrupt(format!("buffer {} has the wrong length", r.name)));
                }
                Ok(r.data.clone())
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ASAC_MAGIC);
        out.push(ASAC_VERSION);
        put_u32(&mut out, self.config_json.len());
        out.extend_from_slice(self.config_json.as_bytes());
        for r in &self.records {
            put_u32(&mut out, r.name.len());
            out.extend_from_slice(r.name.as_bytes());
            put_u32(&mut out, r.shape.len());
            for &d in &r.shape {
                put_u32(&mut out, d);
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut out, 0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[0..4] != ASAC_MAGIC {
            return Err(AsaError::Format("missing ASAC magic".into()));
        }
        if bytes[4] != ASAC_VERSION {
            return Err(AsaError::Format(format!("unsupported checkpoint version {}", bytes[4])));
        }
        let mut rd = Reader { bytes, pos: 5 };
        let len = rd.u32("config length")?;
        let config_json = rd.utf8(len, "config")?;
        let mut ck = Checkpoint::new(config_json);
        loop {
            let name_len = rd.u32("record name length")?;
            if name_len == 0 {
                break;
            }
            let name = rd.utf8(name_len, "record name")?;
            let rank = rd.u32("rank")?;
            let shape = (0..rank).map(|_| rd.u32("dims")).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| AsaError::Corrupt(format!("record {name} is too large")))?;
            let payload = rd.take(n.checked_mul(8).unwrap_or(usize::MAX), "payload")?;
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            ck.push(name, shape, data).map_err(|e| AsaError::Corrupt(e.to_string()))?;
        }
        if rd.pos != bytes.len() {
            return Err(AsaError::Corrupt(format!("{} trailing bytes after terminator", bytes.len() - rd.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 1e-300, f64::MAX, -0.0]));
        store.add("a.b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]));
        let mut ck = Checkpoint::new("{\"seed\":42}");
        ck.push_store("param", &store).unwrap();
        ck.push_u64("rng/seed", u64::MAX - 3).unwrap();
        ck.push_u64("meta/step", 17).unwrap();
        ck
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.get_u64("rng/seed").unwrap(), u64::MAX - 3);
        assert_eq!(back.get_u64("meta/step").unwrap(), 17);
        assert_eq!(back.config_json, "{\"seed\":42}");
    }

    #[test]
    fn bad_inputs() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"XXXX\x01"), Err(AsaError::Format(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(AsaError::Format(_))));
        for cut in [6, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(AsaError::Corrupt(_))), "{cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(AsaError::Corrupt(_))));
    }

    #[test]
    fn load_store_checks_shapes() {
        let ck = sample();
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::zeros(vec![2, 3]));
        store.add("a.b", Tensor::zeros(vec![3]));
        assert_eq!(ck.load_store("param", &mut store, "").unwrap(), 2);
        assert_eq!(store.iter().next().unwrap().tensor.data[4], f64::MAX);
        let mut wrong = ParamStore::new();
        wrong.add("a.b", Tensor::zeros(vec![4]));
        assert!(ck.load_store("param", &mut wrong, "").is_err());
        let mut missing = ParamStore::new();
        missing.add("c", Tensor::zeros(vec![1]));
        assert!(ck.load_store("param", &mut missing, "").is_err());
    }
}
