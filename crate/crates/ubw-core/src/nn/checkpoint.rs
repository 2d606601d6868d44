//! Model checkpoints: a versioned JSON container holding the architecture
//! descriptor, the flat parameter vector, the training seed, and the digest
//! of the run config that produced it. JSON floats are written with
//! shortest-round-trip formatting, so the round trip is lossless at 64-bit
//! precision.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Arch, ModelState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: Arch,
    pub params: Vec<f64>,
    pub prune_mask: Option<Vec<f64>>,
    pub seed: u64,
    pub config_digest: String,
}

const VERSION: u32 = 1;

pub fn save_checkpoint(
    model: &ModelState,
    seed: u64,
    config_digest: &str,
    path: &Path,
) -> Result<()> {
    let file = Checkpoint {
        version: VERSION,
        arch: model.arch().clone(),
        params: model.params().to_vec(),
        prune_mask: model.prune_mask().map(<[f64]>::to_vec),
        seed,
        config_digest: config_digest.to_string(),
    };
    let bytes = serde_json::to_vec(&file)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, Checkpoint)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: Checkpoint = serde_json::from_slice(&bytes)?;
    if file.version != VERSION {
        return Err(Error::BadContainer {
            path: path.display().to_string(),
            why: format!("unsupported checkpoint version {}", file.version),
        });
    }
    let model = ModelState::new(file.arch.clone(), file.params.clone(), file.prune_mask.clone())?;
    Ok((model, file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RngStream;

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let arch = Arch::Mlp {
            widths: vec![3, 7, 2],
        };
        let model = ModelState::init(arch, &RngStream::new(13)).unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&model, 13, "cfg-digest", &path).unwrap();
        let (back, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(meta.seed, 13);
        assert_eq!(meta.config_digest, "cfg-digest");

        // bitwise-stable re-serialization
        let b1 = fs::read(&path).unwrap();
        save_checkpoint(&back, meta.seed, &meta.config_digest, &path).unwrap();
        let b2 = fs::read(&path).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn unknown_fields_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(
            &path,
            br#"{"version":1,"arch":{"type":"mlp","widths":[2,2]},"params":[],"prune_mask":null,"seed":0,"config_digest":"","extra":1}"#,
        )
        .unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
