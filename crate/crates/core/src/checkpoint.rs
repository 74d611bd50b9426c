//! Single-file model container shared by the denoiser and the proxy.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PDCK" | u32 version | u32 len, kind | u64 len, JSON header
//! | u32 count | count × (u32 len, name | u32 rank | rank × u64 dim | f32 data)
//! | 32-byte SHA-256 of everything before it
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"PDCK";
pub const VERSION: u32 = 1;

/// Serializes `params` with a typed header under `kind`.
pub fn to_bytes<H: Serialize>(kind: &str, header: &H, params: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str32(&mut out, kind);
    let json = serde_json::to_vec(header)?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, t) in params.iter() {
        put_str32(&mut out, name);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn put_str32(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Decoded container contents.
pub struct Contents<H> {
    pub kind: String,
    pub header: H,
    pub tensors: Vec<(String, Tensor)>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, wide: bool) -> Result<usize> {
        let n = if wide { self.u64()? } else { u64::from(self.u32()?) };
        usize::try_from(n).map_err(|_| Error::CorruptCheckpoint("length overflow".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len(false)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptCheckpoint("bad utf-8".into()))
    }
}

/// Parses and verifies a container, expecting `kind`.
pub fn from_bytes<H: DeserializeOwned>(bytes: &[u8], kind: &str) -> Result<Contents<H>> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..4] != MAGIC {
        return Err(Error::CorruptCheckpoint("missing magic or truncated".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut cur = Cursor { buf: body, pos: 8 };
    let found_kind = cur.string()?;
    if found_kind != kind {
        return Err(Error::CorruptCheckpoint(format!("expected a {kind} checkpoint, found {found_kind}")));
    }
    let header_len = cur.len(true)?;
    let header = serde_json::from_slice(cur.take(header_len)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    let count = cur.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name = cur.string()?;
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.len(true)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::CorruptCheckpoint("shape overflow".into()))?;
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor::new(shape, data)));
    }
    if cur.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok(Contents {
        kind: found_kind,
        header,
        tensors,
    })
}

/// Copies named tensors into a freshly built store with the same layout.
pub fn restore(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "expected {} parameters, found {}",
            store.len(),
            tensors.len()
        )));
    }
    for (name, t) in tensors {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("unknown parameter {name:?}")))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::CorruptCheckpoint(format!(
                "parameter {name:?} has shape {:?}, expected {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE]));
        s.add("b", Tensor::new(vec![3], vec![0.0, 1e-9, -7.0]));
        s
    }

    #[test]
    fn round_trip() {
        let s = store();
        let bytes = to_bytes("test", &vec![1, 2, 3], &s).unwrap();
        let c: Contents<Vec<i32>> = from_bytes(&bytes, "test").unwrap();
        assert_eq!(c.header, [1, 2, 3]);
        let mut fresh = ParamStore::new();
        fresh.add("a", Tensor::zeros(vec![2, 2]));
        fresh.add("b", Tensor::zeros(vec![3]));
        restore(&mut fresh, c.tensors).unwrap();
        assert_eq!(fresh, s);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = to_bytes("test", &0u8, &store()).unwrap();
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(
                from_bytes::<u8>(&bytes[..cut], "test"),
                Err(Error::CorruptCheckpoint(_))
            ));
        }
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(matches!(from_bytes::<u8>(&flipped, "test"), Err(Error::CorruptCheckpoint(_))));
        let mut newer = bytes.clone();
        newer[4] = 9;
        assert!(matches!(
            from_bytes::<u8>(&newer, "test"),
            Err(Error::CheckpointVersion { found: 9, expected: 1 })
        ));
        assert!(from_bytes::<u8>(&bytes, "other").is_err());
    }
}
