//! Versioned flat binary checkpoint.
//!
//! All integers and floats are little-endian.
//!
//! | field        | type            |
//! |--------------|-----------------|
//! | magic        | `b"NOMMERCK"`   |
//! | version      | `u32` (= 1)     |
//! | config hash  | 32 bytes SHA-256 of the model config |
//! | record count | `u64`           |
//!
//! followed by one record per parameter, in parameter order:
//!
//! | field   | type                  |
//! |---------|-----------------------|
//! | name    | `u32` length + UTF-8  |
//! | rank    | `u32`                 |
//! | extents | `rank × u64`          |
//! | data    | `numel × f64`         |

use std::io::Read;
use std::path::Path;

use crate::error::{NomError, Result};
use crate::fsutil::write_atomic;
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NOMMERCK";
pub const VERSION: u32 = 1;

pub fn encode(model: &Model) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * model.count_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.config.digest());
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for (name, v) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let t = v.value();
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(NomError::Checkpoint(format!(
                "truncated while reading {what}"
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parsed checkpoint contents.
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub records: Vec<(String, Tensor)>,
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(NomError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(NomError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let digest: [u8; 32] = c.take(32, "config hash")?.try_into().unwrap();
    let count = c.u64("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| NomError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| NomError::Checkpoint(format!("`{name}` extents overflow")))?;
        let raw = c.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| NomError::Checkpoint("record too large".into()))?,
            "data",
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data)
            .map_err(|e| NomError::Checkpoint(format!("`{name}`: {e}")))?;
        records.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(NomError::Checkpoint(
            "trailing bytes after last record".into(),
        ));
    }
    Ok(Checkpoint { digest, records })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model))
}

/// Loads parameters for `config`, rejecting checkpoints of another config.
pub fn load(path: &Path, config: ModelConfig) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| NomError::io(path, e))?;
    from_bytes(&bytes, config)
}

pub fn from_bytes(bytes: &[u8], config: ModelConfig) -> Result<Model> {
    let ck = decode(bytes)?;
    if ck.digest != config.digest() {
        return Err(NomError::Checkpoint(
            "checkpoint was written for a different model configuration".into(),
        ));
    }
    let mut store = ParamStore::new();
    for (name, t) in ck.records {
        store.insert(name, t);
    }
    Model::with_params(config, store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = Model::build(ModelConfig::micro(), 5).unwrap();
        let bytes = encode(&m);
        assert_eq!(&bytes[..8], MAGIC);
        let back = from_bytes(&bytes, ModelConfig::micro()).unwrap();
        assert_eq!(back.params.names(), m.params.names());
        for (a, b) in back.params.values().iter().zip(m.params.values()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(&b));
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = Model::build(ModelConfig::micro(), 5).unwrap();
        let bytes = encode(&m);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut other = ModelConfig::micro();
        other.num_classes = 3;
        assert!(matches!(
            from_bytes(&bytes, other),
            Err(NomError::Checkpoint(_))
        ));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let r = load(Path::new("/nonexistent/ck.bin"), ModelConfig::micro());
        assert!(matches!(r, Err(NomError::Io { .. })));
    }
}
