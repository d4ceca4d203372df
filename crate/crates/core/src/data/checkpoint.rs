//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "VQRLCKPT"
//! version    u32      1
//! hash       16 bytes truncated SHA-256 of the producing config
//! segments   u32      count, then per segment:
//!              name_len u32, name (UTF-8), offset u64, ndim u32, dims u64 × ndim
//! values     u64      count, then f64 × count
//! ```

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::DataError;
use crate::numkit::{ParamVector, Segment};

pub const MAGIC: &[u8; 8] = b"VQRLCKPT";
pub const VERSION: u32 = 1;

pub type ConfigHash = [u8; 16];

/// First 16 bytes of the SHA-256 of the config's JSON form.
pub fn config_hash<T: Serialize>(config: &T) -> ConfigHash {
    let json = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&json);
    let mut out = [0u8; 16];
    out.copy_from_slice(&digest[..16]);
    out
}

pub fn hash_hex(h: &ConfigHash) -> String {
    h.iter().map(|b| format!("{b:02x}")).collect()
}

/// `<stage>-<step>.ckpt`
pub fn checkpoint_name(stage: &str, step: usize) -> String {
    format!("{stage}-{step}.ckpt")
}

pub fn encode(params: &ParamVector, hash: &ConfigHash) -> Vec<u8> {
    let mut b = Vec::with_capacity(64 + params.len() * 8);
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(hash);
    b.extend_from_slice(&(params.layout().len() as u32).to_le_bytes());
    for s in params.layout() {
        b.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        b.extend_from_slice(s.name.as_bytes());
        b.extend_from_slice(&(s.offset as u64).to_le_bytes());
        b.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
        for &d in &s.shape {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    b.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| DataError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, DataError> {
        usize::try_from(self.u64()?).map_err(|_| DataError::Checkpoint("length overflows usize".into()))
    }
}

/// Decodes a checkpoint, returning its parameters and stored config hash.
pub fn decode(bytes: &[u8]) -> Result<(ParamVector, ConfigHash), DataError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(DataError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DataError::Checkpoint(format!("unsupported version {version}")));
    }
    let hash: ConfigHash = r.take(16)?.try_into().expect("16 bytes");
    let n_seg = r.u32()? as usize;
    let mut layout = Vec::with_capacity(n_seg.min(1024));
    for _ in 0..n_seg {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| DataError::Checkpoint("segment name is not UTF-8".into()))?
            .to_string();
        let offset = r.len()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
        layout.push(Segment { name, offset, shape });
    }
    let n = r.len()?;
    let raw = r.take(n.checked_mul(8).ok_or_else(|| DataError::Checkpoint("value count overflows".into()))?)?;
    let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    if r.pos != bytes.len() {
        return Err(DataError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let params = ParamVector::from_parts(values, layout).map_err(|e| DataError::Checkpoint(e.to_string()))?;
    Ok((params, hash))
}

pub fn save_checkpoint(path: &Path, params: &ParamVector, hash: &ConfigHash) -> Result<(), DataError> {
    std::fs::write(path, encode(params, hash))?;
    Ok(())
}

/// Loads a checkpoint; with `expected` set, the stored hash must match.
pub fn load_checkpoint(path: &Path, expected: Option<&ConfigHash>) -> Result<(ParamVector, ConfigHash), DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::Open { path: path.to_path_buf(), source: e })?;
    let (params, hash) = decode(&bytes)?;
    if let Some(want) = expected {
        if want != &hash {
            return Err(DataError::HashMismatch { want: hash_hex(want), got: hash_hex(&hash) });
        }
    }
    Ok((params, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::LayoutBuilder;

    fn params() -> ParamVector {
        let mut b = LayoutBuilder::new();
        b.add("w", &[2, 3]);
        b.add("b", &[3]);
        let mut p = b.finish();
        for (i, v) in p.values_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.5 - 1.25;
        }
        p
    }

    #[test]
    fn round_trip_and_hash_check() {
        let h = config_hash(&("cfg", 3));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(checkpoint_name("stage1", 2100));
        save_checkpoint(&path, &params(), &h).unwrap();
        let (p, got) = load_checkpoint(&path, Some(&h)).unwrap();
        assert_eq!(p, params());
        assert_eq!(got, h);
        let other = config_hash(&("cfg", 4));
        assert!(matches!(load_checkpoint(&path, Some(&other)), Err(DataError::HashMismatch { .. })));
        assert!(path.ends_with("stage1-2100.ckpt"));
    }

    #[test]
    fn corrupt_bytes_rejected() {
        let h = [7u8; 16];
        let bytes = encode(&params(), &h);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
