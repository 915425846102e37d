//! Binary parameter archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  "FTKD"
//! u32    version
//! u32    entry count
//! entry* u32 name length, UTF-8 name, u8 dtype (0 = f32), u32 rank,
//!        u64 dim * rank, f32 payload * product(dims)
//! ```
//!
//! Entries are written in name order so equal stores encode to equal bytes.

use std::collections::BTreeSet;
use std::path::Path;

use super::{HarnessError, Result};
use crate::detector::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FTKD";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointArchive {
    pub entries: Vec<Entry>,
}

impl CheckpointArchive {
    /// Snapshot of every tensor in `store`, narrowed to f32.
    pub fn from_store(store: &ParamStore) -> Self {
        CheckpointArchive {
            entries: store
                .iter()
                .map(|(name, t)| Entry {
                    name: name.to_string(),
                    dims: t.shape().to_vec(),
                    data: t.data().iter().map(|&x| x as f32).collect(),
                })
                .collect(),
        }
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for e in &self.entries {
            let data = e.data.iter().map(|&x| f64::from(x)).collect();
            s.insert(&e.name, Tensor::from_parts(e.dims.clone(), data));
        }
        s
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut entries: Vec<&Entry> = self.entries.iter().collect();
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &e.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(HarnessError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(HarnessError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut seen = BTreeSet::new();
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| HarnessError::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(HarnessError::Checkpoint(format!("duplicate entry {name}")));
            }
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(HarnessError::Checkpoint(format!("{name}: unknown dtype tag {dtype}")));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n.filter(|&n| n <= (bytes.len() - r.pos) / 4).ok_or_else(|| HarnessError::Checkpoint(format!("{name}: payload truncated")))?;
            let data = r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            entries.push(Entry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(HarnessError::Checkpoint("trailing bytes".into()));
        }
        Ok(CheckpointArchive { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| HarnessError::Checkpoint("unexpected end of archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{init_auxiliary, init_params, DetectorConfig, FusionMode};
    use crate::world::BevExtent;

    fn store() -> ParamStore {
        let cfg = DetectorConfig {
            n_q: 4,
            c: 6,
            num_classes: 4,
            c_img: 11,
            grid_h: 8,
            grid_w: 8,
            extent: BevExtent::square(10.0),
            dt: 0.5,
            num_frames: 3,
            fusion: FusionMode::Parallel,
        };
        let mut s = init_params(&cfg, 3);
        init_auxiliary(&mut s, &cfg, 4);
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let a = CheckpointArchive::from_store(&store());
        let bytes = a.encode();
        let b = CheckpointArchive::decode(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(CheckpointArchive::from_store(&b.to_store()).encode(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        b.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let mut s = ParamStore::new();
        s.insert("ab", Tensor::from_parts(vec![2], vec![1.0, -2.0]));
        let bytes = CheckpointArchive::from_store(&s).encode();
        let mut expect = b"FTKD".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(b"ab");
        expect.push(0);
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u64.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn corrupt_archives_rejected() {
        let bytes = CheckpointArchive::from_store(&store()).encode();
        assert!(CheckpointArchive::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(CheckpointArchive::decode(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(CheckpointArchive::decode(&extra).is_err());
        assert!(CheckpointArchive::decode(&[]).is_err());
    }

    #[test]
    fn stripped_store_has_no_generators() {
        let a = CheckpointArchive::from_store(&store().strip_auxiliary());
        assert!(a.names().all(|n| !n.starts_with("gen.")));
        assert!(a.names().any(|n| n == "query.feats"));
    }
}
