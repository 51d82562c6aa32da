//! On-disk cache format for volumes and the corpus manifest.
//!
//! A cached volume is a raw little-endian uint8 grid (`.vox`) plus a JSON
//! sidecar (`.vox.json`) carrying shape, spacing, class table and the axis
//! order tag. Grids are stored exactly as laid out in memory: row-major
//! `(L, W, H)` with H fastest.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CorpusError;
use crate::voxel::{LabelVolume, Shape3};

pub const AXIS_ORDER: &str = "row-major (L,W,H), H fastest";
pub const SIDECAR_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    schema_version: u32,
    shape: Shape3,
    spacing: [f64; 3],
    class_table: BTreeMap<u8, String>,
    axis_order: String,
    affine: [[f64; 4]; 3],
}

pub fn io_error(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("sha256:{:x}", hasher.finalize())
}

pub fn file_checksum(path: &Path) -> Result<String, CorpusError> {
    let bytes = fs::read(path).map_err(io_error(path))?;
    Ok(sha256_hex(&bytes))
}

fn sidecar_path(vox_path: &Path) -> PathBuf {
    let mut name = vox_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".json");
    vox_path.with_file_name(name)
}

/// Writes `vol` as `<path>` (raw u8) and `<path>.json`; returns the
/// checksum of the raw grid file.
pub fn write_volume(path: &Path, vol: &LabelVolume) -> Result<String, CorpusError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_error(parent))?;
    }
    fs::write(path, vol.data()).map_err(io_error(path))?;
    let sidecar = Sidecar {
        schema_version: SIDECAR_SCHEMA_VERSION,
        shape: vol.shape(),
        spacing: vol.spacing(),
        class_table: vol.class_table().clone(),
        axis_order: AXIS_ORDER.to_string(),
        affine: vol.affine(),
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    let sc_path = sidecar_path(path);
    fs::write(&sc_path, text).map_err(io_error(&sc_path))?;
    Ok(sha256_hex(vol.data()))
}

/// Byte offset of a (1-based) line/column position in `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.lines().enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    offset
}

pub fn read_volume(path: &Path) -> Result<LabelVolume, CorpusError> {
    let sc_path = sidecar_path(path);
    if !sc_path.exists() {
        return Err(CorpusError::MissingFile { path: sc_path });
    }
    let text = fs::read_to_string(&sc_path).map_err(io_error(&sc_path))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| CorpusError::SidecarParse {
        path: sc_path.clone(),
        line: e.line(),
        column: e.column(),
        offset: byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    if sidecar.axis_order != AXIS_ORDER {
        return Err(CorpusError::UnknownAxisOrder {
            path: sc_path,
            got: sidecar.axis_order,
        });
    }
    if !path.exists() {
        return Err(CorpusError::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let data = fs::read(path).map_err(io_error(path))?;
    Ok(LabelVolume::with_affine(
        sidecar.shape,
        data,
        sidecar.spacing,
        sidecar.class_table,
        sidecar.affine,
    )?)
}

/// Verifies that a referenced grid file exists and matches its recorded
/// checksum.
pub fn verify_file(path: &Path, expected: &str) -> Result<(), CorpusError> {
    if !path.exists() {
        return Err(CorpusError::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let got = file_checksum(path)?;
    if got != expected {
        return Err(CorpusError::ChecksumMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            got,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn sample() -> LabelVolume {
        let table = [(1u8, "a".to_string()), (2, "b".to_string())]
            .into_iter()
            .collect();
        LabelVolume::new([2, 2, 3], vec![0, 1, 2, 0, 0, 1, 2, 2, 0, 1, 0, 0], [0.5, 1.0, 2.0], table)
            .unwrap()
    }

    #[test]
    fn volume_cache_round_trip() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("v.vox");
        let vol = sample();
        let checksum = write_volume(&path, &vol).unwrap();
        verify_file(&path, &checksum).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back, vol);
    }

    #[test]
    fn corrupted_sidecar_reports_byte_offset() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("v.vox");
        write_volume(&path, &sample()).unwrap();
        let sc = dir.path().join("v.vox.json");
        let mut text = fs::read_to_string(&sc).unwrap();
        text.insert(20, '}');
        fs::write(&sc, text).unwrap();
        match read_volume(&path) {
            Err(CorpusError::SidecarParse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected sidecar parse error, got {other:?}"),
        }
    }

    #[test]
    fn checksum_mismatch_is_detected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("v.vox");
        let checksum = write_volume(&path, &sample()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            verify_file(&path, &checksum),
            Err(CorpusError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn missing_file_names_the_path() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("gone.vox");
        match verify_file(&path, "sha256:0") {
            Err(CorpusError::MissingFile { path: p }) => assert!(p.ends_with("gone.vox")),
            other => panic!("expected missing-file error, got {other:?}"),
        }
    }
}
