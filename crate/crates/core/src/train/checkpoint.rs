//! Versioned named-array archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"FEWMAXCK"        8-byte magic
//! u32                format version
//! u64                header length in bytes
//! [u8]               JSON header: epoch, seed, architecture, metadata, array index
//! [f64]              array payloads in index order, row-major
//! ```
//!
//! Payloads are raw IEEE-754 bits, so a save/load roundtrip is bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Architecture;

pub const MAGIC: &[u8; 8] = b"FEWMAXCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub seed: u64,
    pub architecture: Architecture,
    /// Free-form metadata: method, resolved config, metric log.
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, ArrayD<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    epoch: usize,
    seed: u64,
    architecture: Architecture,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    /// Arrays whose name starts with `prefix`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> Vec<(String, ArrayD<f64>)> {
        self.arrays
            .iter()
            .filter_map(|(n, a)| n.strip_prefix(prefix).map(|s| (s.to_string(), a.clone())))
            .collect()
    }

    pub fn has_group(&self, prefix: &str) -> bool {
        self.arrays.iter().any(|(n, _)| n.starts_with(prefix))
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let header = Header {
        epoch: checkpoint.epoch,
        seed: checkpoint.seed,
        architecture: checkpoint.architecture.clone(),
        meta: checkpoint.meta.clone(),
        arrays: checkpoint
            .arrays
            .iter()
            .map(|(name, a)| ArrayEntry {
                name: name.clone(),
                shape: a.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let payload: usize = checkpoint.arrays.iter().map(|(_, a)| a.len() * 8).sum();
    let mut bytes = Vec::with_capacity(20 + header.len() + payload);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for (_, array) in &checkpoint.arrays {
        for v in array.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("ckpt.partial");
    fs::File::create(&tmp)?.write_all(&bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::load(path, e))?
        .read_to_end(&mut bytes)?;
    let corrupt = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < header_len {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| corrupt(&format!("bad header: {e}")))?;
    let mut data = &body[header_len..];
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for entry in header.arrays {
        let len: usize = entry.shape.iter().product();
        if data.len() < len * 8 {
            return Err(corrupt(&format!("truncated payload for {}", entry.name)));
        }
        let values: Vec<f64> = data[..len * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[len * 8..];
        let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| corrupt(&e.to_string()))?;
        arrays.push((entry.name, array));
    }
    if !data.is_empty() {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok(Checkpoint {
        epoch: header.epoch,
        seed: header.seed,
        architecture: header.architecture,
        meta: header.meta,
        arrays,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            epoch: 3,
            seed: 42,
            architecture: Architecture {
                in_channels: 1,
                widths: vec![2],
                strides: vec![1],
                kernel: 3,
                hidden: 2,
                embed_dim: 2,
            },
            meta: serde_json::json!({"method": "few_max"}),
            arrays: vec![
                ("net/a".into(), ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
                ("net/b".into(), ArrayD::from_shape_vec(IxDyn(&[1]), vec![std::f64::consts::PI]).unwrap()),
            ],
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.epoch, 3);
        for ((n1, a1), (n2, a2)) in ckpt.arrays.iter().zip(&back.arrays) {
            assert_eq!(n1, n2);
            let bits = |a: &ArrayD<f64>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a1), bits(a2));
        }
        assert_eq!(back.group("net/").len(), 2);
    }

    #[test]
    fn version_mismatch_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Version { found: 99, expected: CHECKPOINT_VERSION })
        ));

        save_checkpoint(&path, &sample()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
