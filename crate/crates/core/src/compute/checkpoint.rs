//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "GEDCKPT\0"
//! version  u32      currently 1
//! config   u32 length + UTF-8 bytes (flat key-value model config)
//! count    u32      number of parameters
//! repeated count times, in store insertion order:
//!   name   u32 length + UTF-8 bytes
//!   rank   u32
//!   dims   rank × u64
//!   values product(dims) × f64, row-major
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{ComputeError, ParameterStore, Tensor};

pub const MAGIC: &[u8; 8] = b"GEDCKPT\0";
pub const VERSION: u32 = 1;

pub fn encode(config_text: &str, store: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + store.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, config_text);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        put_str(&mut out, store.name(id));
        let t = store.value(id);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ComputeError> {
        if self.pos + n > self.buf.len() {
            return Err(ComputeError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ComputeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ComputeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, ComputeError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| ComputeError::Checkpoint(e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(String, ParameterStore), ComputeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(ComputeError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ComputeError::Checkpoint(format!("unsupported version {version}")));
    }
    let config = r.string()?;
    let count = r.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        store.insert(&name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(ComputeError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((config, store))
}

/// Writes via a temporary sibling file and a rename so readers never observe
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn save(path: &Path, config_text: &str, store: &ParameterStore) -> Result<(), ComputeError> {
    write_atomic(path, &encode(config_text, store)).map_err(|e| ComputeError::Checkpoint(e.to_string()))
}

pub fn load(path: &Path) -> Result<(String, ParameterStore), ComputeError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ComputeError::Checkpoint(format!("{}: {}", path.display(), e)))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("z.last", Tensor::matrix(2, 3, vec![1.5, -0.0, 3.25, f64::MIN_POSITIVE, 7.0, -1e-300]).unwrap()).unwrap();
        s.insert("a.first", Tensor::vector(vec![0.1])).unwrap();
        s
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = encode("model = char\n", &sample_store());
        let (cfg, store) = decode(&bytes).unwrap();
        assert_eq!(cfg, "model = char\n");
        assert_eq!(encode(&cfg, &store), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode("", &sample_store());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn atomic_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, "k = v", &sample_store()).unwrap();
        let (cfg, store) = load(&p).unwrap();
        assert_eq!(cfg, "k = v");
        assert_eq!(store.get("a.first").unwrap().data(), &[0.1]);
        assert!(!p.with_extension("tmp").exists());
    }
}
