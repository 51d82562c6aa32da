//! Self-describing checkpoint files: weights, the architecture config,
//! the corpus manifest checksum and the training seed, integrity-guarded
//! by a trailing digest. Writes are atomic (temp file + rename).

use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{build_dae, Dae, DaeConfig, NetworkError};

const MAGIC: &[u8; 8] = b"SHCP0001";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated checkpoint")]
    Truncated { path: PathBuf },
    #[error("{path}: checkpoint digest mismatch; file is corrupt")]
    DigestMismatch { path: PathBuf },
    #[error("{path}: malformed checkpoint header: {message}")]
    Header { path: PathBuf, message: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub dae: DaeConfig,
    pub seed: u64,
    pub manifest_checksum: String,
    pub param_count: usize,
    /// Free-form metadata slot (experiment name, loss config, config hash).
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &Dae,
    seed: u64,
    manifest_checksum: &str,
    extra: serde_json::Value,
) -> Result<(), CheckpointError> {
    let header = CheckpointHeader {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        dae: model.config.clone(),
        seed,
        manifest_checksum: manifest_checksum.to_string(),
        param_count: model.count_parameters(),
        extra,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(header_json.len() + header.param_count * 4 + 64);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for p in model.flat_params() {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);

    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    std::fs::write(tmp.path(), &bytes).map_err(io_err(tmp.path()))?;
    tmp.persist(path)
        .map_err(|e| CheckpointError::Io {
            path: path.to_path_buf(),
            source: e.error,
        })?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Dae, CheckpointHeader), CheckpointError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(CheckpointError::Truncated {
            path: path.to_path_buf(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::DigestMismatch {
            path: path.to_path_buf(),
        });
    }
    let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let header_end = 12 + header_len;
    if body.len() < header_end {
        return Err(CheckpointError::Truncated {
            path: path.to_path_buf(),
        });
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[12..header_end]).map_err(|e| CheckpointError::Header {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let payload = &body[header_end..];
    if payload.len() != header.param_count * 4 {
        return Err(CheckpointError::Truncated {
            path: path.to_path_buf(),
        });
    }
    let params: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut model = build_dae(&header.dae, false)?;
    model.load_flat_params(&params)?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    fn tiny_model() -> Dae {
        let config = DaeConfig {
            input_shape: [8, 8, 8],
            down_stages: 2,
            channel_widths: vec![3, 6],
            kernel_size: 3,
            residual: true,
            num_classes: 1,
            final_activation: super::super::FinalActivation::Sigmoid,
        };
        let mut model = build_dae(&config, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        model.init_weights(&mut rng);
        model
    }

    #[test]
    fn checkpoint_round_trip_preserves_params_and_meta() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model();
        save_checkpoint(&path, &model, 42, "sha256:abc", serde_json::json!({"k": 1})).unwrap();
        let (back, header) = load_checkpoint(&path).unwrap();
        assert_eq!(back.flat_params(), model.flat_params());
        assert_eq!(header.seed, 42);
        assert_eq!(header.manifest_checksum, "sha256:abc");
        assert_eq!(header.dae, model.config);
        assert_eq!(header.extra["k"], 1);
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &tiny_model(), 1, "sha256:x", serde_json::Value::Null).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn non_checkpoint_file_is_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("not.ckpt");
        std::fs::write(&path, vec![0u8; 100]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic { .. })
        ));
    }
}
