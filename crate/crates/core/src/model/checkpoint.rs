//! Binary checkpoint layout (little-endian):
//!
//! ```text
//! magic "KDGATCKP" | version u32 | header_len u32 | header JSON {arch, meta}
//! | blocks u32 | per block: name_len u32 | name | rows u32 | cols u32 | f64 * rows·cols
//! | SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::{build_model, GatModel};
use super::{ArchConfig, ModelError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"KDGATCKP";
const HASH_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `teacher` or `student`.
    pub role: String,
    pub epoch: Option<usize>,
    pub val_accuracy: Option<f64>,
    pub val_f1: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
    /// Effective configuration the model was produced with.
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    meta: CheckpointMeta,
}

pub fn write_checkpoint(model: &GatModel, meta: &CheckpointMeta) -> Vec<u8> {
    let header = serde_json::to_vec(&Header { arch: *model.arch(), meta: meta.clone() }).expect("header serializes");
    let named = model.named_parameters();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in &named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::CorruptCheckpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(GatModel, CheckpointMeta)> {
    let corrupt = |m: &str| ModelError::CorruptCheckpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("missing checkpoint header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    if bytes.len() < 12 + HASH_LEN {
        return Err(corrupt("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - HASH_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("integrity hash mismatch"));
    }
    let mut cur = Cursor { buf: body, pos: 12 };
    let header_len = cur.u32()? as usize;
    let header: Header =
        serde_json::from_slice(cur.take(header_len)?).map_err(|e| corrupt(&format!("header: {e}")))?;
    let model = build_model(header.arch, 0)?;
    let named = model.named_parameters();
    let blocks = cur.u32()? as usize;
    if blocks != named.len() {
        return Err(corrupt(&format!("{blocks} parameter blocks, architecture needs {}", named.len())));
    }
    for (name, t) in &named {
        let len = cur.u32()? as usize;
        let got = cur.take(len)?;
        if got != name.as_bytes() {
            return Err(corrupt(&format!("expected block {name}, found {}", String::from_utf8_lossy(got))));
        }
        let (rows, cols) = (cur.u32()? as usize, cur.u32()? as usize);
        if (rows, cols) != t.shape() {
            return Err(corrupt(&format!("{name}: shape {rows}x{cols}, expected {:?}", t.shape())));
        }
        let raw = cur.take(rows * cols * 8)?;
        let mut data = t.data_mut();
        for (d, chunk) in data.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            if !d.is_finite() {
                return Err(corrupt(&format!("{name}: non-finite value")));
            }
        }
    }
    if cur.pos != body.len() {
        return Err(corrupt("trailing bytes after parameter blocks"));
    }
    Ok((model, header.meta))
}

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io { path: path.display().to_string(), source }
}

pub fn save_checkpoint(model: &GatModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model, meta)).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(GatModel, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    read_checkpoint(&bytes)
}

/// Loads a checkpoint and rejects it unless its architecture equals `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ArchConfig) -> Result<(GatModel, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(path)?;
    if model.arch() != expected {
        return Err(ModelError::ArchMismatch { expected: format!("{expected:?}"), found: format!("{:?}", model.arch()) });
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, WindowGraph};

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            role: "student".into(),
            epoch: Some(3),
            val_accuracy: Some(0.75),
            val_f1: None,
            seed: 7,
            config_hash: "0123456789abcdef".into(),
            config: serde_json::json!({"lr": 5e-4}),
        }
    }

    fn graph() -> WindowGraph {
        WindowGraph {
            node_ids: vec![1, 2, 3],
            x: vec![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9]],
            edges: vec![Edge { src: 0, dst: 1, weight: 2 }, Edge { src: 1, dst: 2, weight: 1 }],
            label: 1,
            window_start_index: 0,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = build_model(ArchConfig::student(), 11).unwrap();
        let bytes = write_checkpoint(&m, &meta());
        let (back, meta_back) = read_checkpoint(&bytes).unwrap();
        assert_eq!(meta_back, meta());
        assert_eq!(back.snapshot(), m.snapshot());
        assert_eq!(back.forward(&graph()).unwrap(), m.forward(&graph()).unwrap());
        assert_eq!(write_checkpoint(&back, &meta_back), bytes);
    }

    #[test]
    fn damaged_files() {
        let m = build_model(ArchConfig::student(), 11).unwrap();
        let bytes = write_checkpoint(&m, &meta());
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(read_checkpoint(&bytes[..cut]), Err(ModelError::CorruptCheckpoint(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(matches!(read_checkpoint(&flipped), Err(ModelError::CorruptCheckpoint(_))));
        let mut newer = bytes.clone();
        newer[8] = 9;
        assert!(matches!(read_checkpoint(&newer), Err(ModelError::VersionMismatch { found: 9, expected: 1 })));
    }

    #[test]
    fn arch_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.ckpt");
        let t = build_model(ArchConfig::teacher(), 1).unwrap();
        save_checkpoint(&t, &meta(), &path).unwrap();
        assert!(load_checkpoint_expecting(&path, &ArchConfig::teacher()).is_ok());
        assert!(matches!(
            load_checkpoint_expecting(&path, &ArchConfig::student()),
            Err(ModelError::ArchMismatch { .. })
        ));
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(ModelError::Io { .. })));
    }
}
