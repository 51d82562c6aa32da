//! Minimal NIfTI-1 reader/writer for label volumes.
//!
//! Supports `.nii` and `.nii.gz`, little-endian only. Volumes are written
//! as unsigned 8-bit labels with the voxel-to-world affine stored in the
//! sform rows. On disk NIfTI stores the first axis fastest while the
//! in-memory layout here is row-major `(L, W, H)` (H fastest), so data is
//! transposed on the way in and out; the logical axis mapping is
//! `(i, j, k) = (L, W, H)` and the affine carries over unchanged.
//!
//! The class table has no NIfTI representation. It round-trips through a
//! JSON sidecar `<name>.classes.json` next to the volume; when the sidecar
//! is absent, classes are synthesized as `class_<id>`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use super::{BinaryVolume, LabelVolume, Shape3, VoxelError};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: file truncated at byte {offset}, expected {expected} more bytes")]
    Truncated {
        path: PathBuf,
        offset: usize,
        expected: usize,
    },
    #[error("{path}: bad sizeof_hdr {got} at byte 0 (big-endian or non-NIfTI file)")]
    BadSizeofHdr { path: PathBuf, got: i32 },
    #[error("{path}: bad magic {got:?} at byte 344, expected \"n+1\"")]
    BadMagic { path: PathBuf, got: [u8; 4] },
    #[error("{path}: unsupported dim[0]={0} (need a 3D volume)", .dim0)]
    BadDims { path: PathBuf, dim0: i16 },
    #[error("{path}: unsupported datatype code {code}")]
    UnsupportedDatatype { path: PathBuf, code: i16 },
    #[error("{path}: voxel value {value} cannot be stored as a u8 label")]
    LabelRange { path: PathBuf, value: f64 },
    #[error("{path}: scaled intensities (scl_slope={slope}, scl_inter={inter}) are not valid for label volumes")]
    ScaledLabels {
        path: PathBuf,
        slope: f32,
        inter: f32,
    },
    #[error("{path}: class-table sidecar is malformed: {source}")]
    Sidecar {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Voxel(#[from] VoxelError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> NiftiError + '_ {
    move |source| NiftiError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().map_or(false, |e| e == "gz")
}

fn read_all(path: &Path) -> Result<Vec<u8>, NiftiError> {
    let mut file = File::open(path).map_err(io_err(path))?;
    let mut raw = Vec::new();
    if is_gz(path) {
        GzDecoder::new(&mut file)
            .read_to_end(&mut raw)
            .map_err(io_err(path))?;
    } else {
        file.read_to_end(&mut raw).map_err(io_err(path))?;
    }
    Ok(raw)
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<(), NiftiError> {
    let file = File::create(path).map_err(io_err(path))?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).map_err(io_err(path))?;
        enc.finish().map_err(io_err(path))?;
    } else {
        let mut file = file;
        file.write_all(bytes).map_err(io_err(path))?;
    }
    Ok(())
}

fn i16_at(raw: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([raw[off], raw[off + 1]])
}

fn f32_at(raw: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([raw[off], raw[off + 1], raw[off + 2], raw[off + 3]])
}

/// Sidecar path for a volume: `subject.nii.gz -> subject.classes.json`.
pub fn sidecar_path(volume_path: &Path) -> PathBuf {
    let name = volume_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name);
    volume_path.with_file_name(format!("{stem}.classes.json"))
}

fn load_class_table(
    volume_path: &Path,
    data: &[u8],
) -> Result<BTreeMap<u8, String>, NiftiError> {
    let sidecar = sidecar_path(volume_path);
    if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar).map_err(io_err(&sidecar))?;
        let table: BTreeMap<u8, String> =
            serde_json::from_str(&text).map_err(|source| NiftiError::Sidecar {
                path: sidecar.clone(),
                source,
            })?;
        return Ok(table);
    }
    let mut table = BTreeMap::new();
    for &v in data {
        if v != 0 {
            table.entry(v).or_insert_with(|| format!("class_{v}"));
        }
    }
    Ok(table)
}

struct ParsedHeader {
    shape: Shape3,
    spacing: [f64; 3],
    affine: [[f64; 4]; 3],
    datatype: i16,
    vox_offset: usize,
}

fn parse_header(path: &Path, raw: &[u8]) -> Result<ParsedHeader, NiftiError> {
    if raw.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated {
            path: path.to_path_buf(),
            offset: raw.len(),
            expected: HEADER_SIZE - raw.len(),
        });
    }
    let sizeof_hdr = i32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(NiftiError::BadSizeofHdr {
            path: path.to_path_buf(),
            got: sizeof_hdr,
        });
    }
    let magic: [u8; 4] = [raw[344], raw[345], raw[346], raw[347]];
    if &magic[..3] != b"n+1" && &magic[..3] != b"ni1" {
        return Err(NiftiError::BadMagic {
            path: path.to_path_buf(),
            got: magic,
        });
    }
    let dim0 = i16_at(raw, 40);
    if !(1..=7).contains(&dim0) {
        return Err(NiftiError::BadDims {
            path: path.to_path_buf(),
            dim0,
        });
    }
    let mut dims = [1usize; 7];
    for (a, d) in dims.iter_mut().enumerate().take(dim0 as usize) {
        let v = i16_at(raw, 40 + 2 * (a + 1));
        if v < 1 {
            return Err(NiftiError::BadDims {
                path: path.to_path_buf(),
                dim0,
            });
        }
        *d = v as usize;
    }
    if dims[3..].iter().any(|&d| d != 1) {
        return Err(NiftiError::BadDims {
            path: path.to_path_buf(),
            dim0,
        });
    }
    let shape = [dims[0], dims[1], dims[2]];
    let datatype = i16_at(raw, 70);
    let slope = f32_at(raw, 112);
    let inter = f32_at(raw, 116);
    if !(slope == 0.0 || slope == 1.0) || inter != 0.0 {
        return Err(NiftiError::ScaledLabels {
            path: path.to_path_buf(),
            slope,
            inter,
        });
    }
    let pixdim = [
        f32_at(raw, 80) as f64,
        f32_at(raw, 84) as f64,
        f32_at(raw, 88) as f64,
    ];
    let spacing = [
        if pixdim[0] > 0.0 { pixdim[0] } else { 1.0 },
        if pixdim[1] > 0.0 { pixdim[1] } else { 1.0 },
        if pixdim[2] > 0.0 { pixdim[2] } else { 1.0 },
    ];
    let sform_code = i16_at(raw, 254);
    let affine = if sform_code > 0 {
        let mut m = [[0.0f64; 4]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f32_at(raw, 280 + r * 16 + c * 4) as f64;
            }
        }
        m
    } else {
        super::identity_affine(spacing)
    };
    let vox_offset = f32_at(raw, 108).max(HEADER_SIZE as f32) as usize;
    Ok(ParsedHeader {
        shape,
        spacing,
        affine,
        datatype,
        vox_offset,
    })
}

fn decode_voxels(path: &Path, hdr: &ParsedHeader, raw: &[u8]) -> Result<Vec<u8>, NiftiError> {
    let n = hdr.shape[0] * hdr.shape[1] * hdr.shape[2];
    let width = match hdr.datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        code => {
            return Err(NiftiError::UnsupportedDatatype {
                path: path.to_path_buf(),
                code,
            })
        }
    };
    let need = n * width;
    let body = raw.get(hdr.vox_offset..).unwrap_or(&[]);
    if body.len() < need {
        return Err(NiftiError::Truncated {
            path: path.to_path_buf(),
            offset: hdr.vox_offset + body.len(),
            expected: need - body.len(),
        });
    }
    let body = &body[..need];
    let range_err = |value: f64| NiftiError::LabelRange {
        path: path.to_path_buf(),
        value,
    };
    let mut out = Vec::with_capacity(n);
    match hdr.datatype {
        DT_UINT8 => out.extend_from_slice(body),
        DT_INT8 => {
            for &b in body {
                let v = b as i8;
                if v < 0 {
                    return Err(range_err(v as f64));
                }
                out.push(v as u8);
            }
        }
        DT_INT16 | DT_UINT16 => {
            for ch in body.chunks_exact(2) {
                let v = if hdr.datatype == DT_INT16 {
                    i16::from_le_bytes([ch[0], ch[1]]) as i64
                } else {
                    u16::from_le_bytes([ch[0], ch[1]]) as i64
                };
                if !(0..=255).contains(&v) {
                    return Err(range_err(v as f64));
                }
                out.push(v as u8);
            }
        }
        DT_INT32 => {
            for ch in body.chunks_exact(4) {
                let v = i32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]) as i64;
                if !(0..=255).contains(&v) {
                    return Err(range_err(v as f64));
                }
                out.push(v as u8);
            }
        }
        DT_FLOAT32 => {
            for ch in body.chunks_exact(4) {
                let v = f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]) as f64;
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    return Err(range_err(v));
                }
                out.push(v as u8);
            }
        }
        _ => unreachable!(),
    }
    Ok(out)
}

/// Disk order (first axis fastest) to row-major `(L, W, H)`.
fn disk_to_memory(disk: &[u8], shape: Shape3) -> Vec<u8> {
    let [l_n, w_n, h_n] = shape;
    let mut out = vec![0u8; disk.len()];
    for h in 0..h_n {
        for w in 0..w_n {
            for l in 0..l_n {
                out[(l * w_n + w) * h_n + h] = disk[l + w * l_n + h * l_n * w_n];
            }
        }
    }
    out
}

fn memory_to_disk(mem: &[u8], shape: Shape3) -> Vec<u8> {
    let [l_n, w_n, h_n] = shape;
    let mut out = vec![0u8; mem.len()];
    for l in 0..l_n {
        for w in 0..w_n {
            for h in 0..h_n {
                out[l + w * l_n + h * l_n * w_n] = mem[(l * w_n + w) * h_n + h];
            }
        }
    }
    out
}

/// Reads a label volume, using the `.classes.json` sidecar when present.
pub fn read_label_volume(path: &Path) -> Result<LabelVolume, NiftiError> {
    let raw = read_all(path)?;
    let hdr = parse_header(path, &raw)?;
    let disk = decode_voxels(path, &hdr, &raw)?;
    let data = disk_to_memory(&disk, hdr.shape);
    let class_table = load_class_table(path, &data)?;
    Ok(LabelVolume::with_affine(
        hdr.shape,
        data,
        hdr.spacing,
        class_table,
        hdr.affine,
    )?)
}

pub fn read_binary_volume(path: &Path) -> Result<BinaryVolume, NiftiError> {
    let raw = read_all(path)?;
    let hdr = parse_header(path, &raw)?;
    let disk = decode_voxels(path, &hdr, &raw)?;
    let data = disk_to_memory(&disk, hdr.shape);
    Ok(BinaryVolume::new(hdr.shape, data, hdr.spacing)?)
}

fn encode(shape: Shape3, spacing: [f64; 3], affine: [[f64; 4]; 3], mem: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; VOX_OFFSET];
    out[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dims: [i16; 8] = [
        3,
        shape[0] as i16,
        shape[1] as i16,
        shape[2] as i16,
        1,
        1,
        1,
        1,
    ];
    for (a, d) in dims.iter().enumerate() {
        out[40 + 2 * a..42 + 2 * a].copy_from_slice(&d.to_le_bytes());
    }
    out[70..72].copy_from_slice(&DT_UINT8.to_le_bytes());
    out[72..74].copy_from_slice(&8i16.to_le_bytes());
    let pixdim: [f32; 8] = [
        1.0,
        spacing[0] as f32,
        spacing[1] as f32,
        spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    for (a, p) in pixdim.iter().enumerate() {
        out[76 + 4 * a..80 + 4 * a].copy_from_slice(&p.to_le_bytes());
    }
    out[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    out[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    out[254..256].copy_from_slice(&2i16.to_le_bytes()); // sform_code: aligned
    for (r, row) in affine.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            out[280 + r * 16 + c * 4..284 + r * 16 + c * 4]
                .copy_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out[344..348].copy_from_slice(b"n+1\0");
    out.extend_from_slice(&memory_to_disk(mem, shape));
    out
}

/// Writes a label volume and its class-table sidecar.
pub fn write_label_volume(path: &Path, vol: &LabelVolume) -> Result<(), NiftiError> {
    let bytes = encode(vol.shape(), vol.spacing(), vol.affine(), vol.data());
    write_all(path, &bytes)?;
    let sidecar = sidecar_path(path);
    let text = serde_json::to_string_pretty(vol.class_table()).expect("serializable table");
    std::fs::write(&sidecar, text).map_err(io_err(&sidecar))?;
    Ok(())
}

pub fn write_binary_volume(path: &Path, vol: &BinaryVolume) -> Result<(), NiftiError> {
    let affine = super::identity_affine(vol.spacing());
    let bytes = encode(vol.shape(), vol.spacing(), affine, vol.data());
    write_all(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    fn sample_volume() -> LabelVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let data: Vec<u8> = (0..5 * 6 * 7).map(|_| rng.gen_range(0..4)).collect();
        let table = (1..4).map(|i| (i, format!("organ_{i}"))).collect();
        let affine = [
            [1.5, 0.0, 0.0, -10.0],
            [0.0, 2.0, 0.0, 5.0],
            [0.0, 0.0, 0.75, 0.0],
        ];
        LabelVolume::with_affine([5, 6, 7], data, [1.5, 2.0, 0.75], table, affine).unwrap()
    }

    #[test]
    fn nii_round_trip_is_lossless() {
        let dir = TempDir::new().unwrap();
        let vol = sample_volume();
        for name in ["vol.nii", "vol.nii.gz"] {
            let path = dir.path().join(name);
            write_label_volume(&path, &vol).unwrap();
            let back = read_label_volume(&path).unwrap();
            assert_eq!(back.data(), vol.data());
            assert_eq!(back.shape(), vol.shape());
            assert_eq!(back.class_table(), vol.class_table());
            for a in 0..3 {
                assert!((back.spacing()[a] - vol.spacing()[a]).abs() < 1e-6);
                for c in 0..4 {
                    assert!((back.affine()[a][c] - vol.affine()[a][c]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn writes_are_byte_identical_across_runs() {
        let dir = TempDir::new().unwrap();
        let vol = sample_volume();
        let a = dir.path().join("a.nii.gz");
        let b = dir.path().join("b.nii.gz");
        write_label_volume(&a, &vol).unwrap();
        write_label_volume(&b, &vol).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn missing_sidecar_synthesizes_class_names() {
        let dir = TempDir::new().unwrap();
        let vol = sample_volume();
        let path = dir.path().join("vol.nii");
        write_label_volume(&path, &vol).unwrap();
        std::fs::remove_file(sidecar_path(&path)).unwrap();
        let back = read_label_volume(&path).unwrap();
        assert_eq!(back.class_table().get(&1).unwrap(), "class_1");
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("trunc.nii");
        std::fs::write(&path, [0u8; 100]).unwrap();
        match read_label_volume(&path) {
            Err(NiftiError::Truncated { offset, .. }) => assert_eq!(offset, 100),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.nii");
        let mut bytes = vec![0u8; 400];
        bytes[0..4].copy_from_slice(&348i32.to_le_bytes());
        bytes[344..348].copy_from_slice(b"xxx\0");
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_label_volume(&path),
            Err(NiftiError::BadMagic { .. })
        ));
    }

    #[test]
    fn value_above_u8_range_is_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("wide.nii");
        // Hand-build an int16 volume with one out-of-range voxel.
        let mut bytes = vec![0u8; VOX_OFFSET];
        bytes[0..4].copy_from_slice(&348i32.to_le_bytes());
        for (a, d) in [3i16, 1, 1, 2, 1, 1, 1, 1].iter().enumerate() {
            bytes[40 + 2 * a..42 + 2 * a].copy_from_slice(&d.to_le_bytes());
        }
        bytes[70..72].copy_from_slice(&DT_INT16.to_le_bytes());
        bytes[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
        bytes[344..348].copy_from_slice(b"n+1\0");
        bytes.extend_from_slice(&300i16.to_le_bytes());
        bytes.extend_from_slice(&1i16.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_label_volume(&path),
            Err(NiftiError::LabelRange { value, .. }) if value == 300.0
        ));
    }
}
