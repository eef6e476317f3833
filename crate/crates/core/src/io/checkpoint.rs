//! Single-file training checkpoints: a magic line followed by a JSON
//! archive of named f64 tensors, integer counters, and the hash of the
//! run configuration. Shortest round-trip float printing keeps reloads
//! bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "pointsplat-checkpoint";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: usize,
    /// Hash of the run configuration that produced this checkpoint;
    /// resuming under a different configuration is refused by callers.
    pub config_hash: String,
    pub tensors: BTreeMap<String, Vec<f64>>,
    pub counters: BTreeMap<String, u64>,
}

impl Checkpoint {
    pub fn new(epoch: usize, config_hash: String) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            epoch,
            config_hash,
            tensors: BTreeMap::new(),
            counters: BTreeMap::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Vec<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name:?}")))
    }

    pub fn counter(&self, name: &str) -> Result<u64> {
        self.counters
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("checkpoint lacks counter {name:?}")))
    }
}

/// Hex SHA-256 of configuration bytes, used to bind checkpoints to runs.
pub fn config_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if ckpt.tensors.values().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("checkpoint tensor"));
    }
    let body = serde_json::to_string(ckpt).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, format!("{MAGIC} v{CHECKPOINT_VERSION}\n{body}\n"))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let Some((first, body)) = text.split_once('\n') else {
        return Err(Error::Format(format!("{}: empty checkpoint", path.display())));
    };
    if first.trim() != format!("{MAGIC} v{CHECKPOINT_VERSION}") {
        return Err(Error::Format(format!(
            "{}: bad checkpoint magic {first:?}",
            path.display()
        )));
    }
    let ckpt: Checkpoint = serde_json::from_str(body)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", ckpt.version)));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{key_uniform, Stream};
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut ckpt = Checkpoint::new(17, config_hash(b"config"));
        let noise: Vec<f64> = (0..4096)
            .map(|i| (key_uniform(5, Stream::Noise, i, 1) - 0.5) * 1e6)
            .collect();
        ckpt.tensors.insert("texture".into(), noise.clone());
        ckpt.tensors.insert("tiny".into(), vec![f64::MIN_POSITIVE, f64::MAX, -0.0]);
        ckpt.counters.insert("adam.texture.t".into(), 123456789);
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.epoch, 17);
        assert_eq!(back.config_hash, ckpt.config_hash);
        assert_eq!(back.tensor("texture").unwrap(), &noise);
        let tiny = back.tensor("tiny").unwrap();
        assert_eq!(tiny[0].to_bits(), f64::MIN_POSITIVE.to_bits());
        assert_eq!(tiny[1].to_bits(), f64::MAX.to_bits());
        assert_eq!(back.counter("adam.texture.t").unwrap(), 123456789);
    }

    #[test]
    fn non_finite_tensors_and_bad_magic_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut ckpt = Checkpoint::new(0, String::new());
        ckpt.tensors.insert("x".into(), vec![f64::NAN]);
        assert!(save_checkpoint(&ckpt, &path).is_err());

        std::fs::write(&path, "something else\n{}").unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = config_hash(b"alpha");
        assert_eq!(a, config_hash(b"alpha"));
        assert_ne!(a, config_hash(b"beta"));
        assert_eq!(a.len(), 64);
    }
}
