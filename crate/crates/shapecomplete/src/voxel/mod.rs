//! Core volumetric data types and geometry-preserving transforms.
//!
//! All grids use a dense row-major layout with axis order `(L, W, H)`,
//! i.e. the H index varies fastest in memory. Every type is immutable
//! after construction and every operation is a pure function, so values
//! can be shared freely across worker threads.

pub mod nifti;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grid dimensions in `(L, W, H)` order.
pub type Shape3 = [usize; 3];

#[derive(Debug, Error)]
pub enum VoxelError {
    #[error("volume has an empty grid (shape {0:?})")]
    EmptyGrid(Shape3),
    #[error("data length {actual} does not match shape {shape:?} ({expected} voxels)")]
    DataLength {
        shape: Shape3,
        expected: usize,
        actual: usize,
    },
    #[error("voxel spacing must be positive, got {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("label {label} is not in the class table and is not background")]
    UnknownLabel { label: u8 },
    #[error("class {0} is not present in the class table")]
    UnknownClass(u8),
    #[error("label {label} is out of range for {num_classes} classes")]
    LabelOutOfRange { label: u8, num_classes: usize },
    #[error("one-hot encoding requires at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("binary volume contains value {0}, expected 0 or 1")]
    NotBinary(u8),
    #[error("reference population for the volume fraction is empty")]
    EmptyReference,
    #[error("target shape {0:?} has a zero component")]
    InvalidTargetShape(Shape3),
}

fn check_shape(shape: Shape3) -> Result<usize, VoxelError> {
    let n = shape[0]
        .checked_mul(shape[1])
        .and_then(|p| p.checked_mul(shape[2]))
        .unwrap_or(0);
    if n == 0 {
        return Err(VoxelError::EmptyGrid(shape));
    }
    Ok(n)
}

fn identity_affine(spacing: [f64; 3]) -> [[f64; 4]; 3] {
    [
        [spacing[0], 0.0, 0.0, 0.0],
        [0.0, spacing[1], 0.0, 0.0],
        [0.0, 0.0, spacing[2], 0.0],
    ]
}

/// Dense 3D grid of anatomy class labels with voxel-spacing metadata.
///
/// Label `0` is background; every other label present in the data must
/// have an entry in the class table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelVolume {
    shape: Shape3,
    data: Vec<u8>,
    spacing: [f64; 3],
    class_table: BTreeMap<u8, String>,
    affine: [[f64; 4]; 3],
}

impl LabelVolume {
    /// Builds a volume with a diagonal (spacing-scaled) voxel-to-world affine.
    pub fn new(
        shape: Shape3,
        data: Vec<u8>,
        spacing: [f64; 3],
        class_table: BTreeMap<u8, String>,
    ) -> Result<Self, VoxelError> {
        let affine = identity_affine(spacing);
        Self::with_affine(shape, data, spacing, class_table, affine)
    }

    pub fn with_affine(
        shape: Shape3,
        data: Vec<u8>,
        spacing: [f64; 3],
        class_table: BTreeMap<u8, String>,
        affine: [[f64; 4]; 3],
    ) -> Result<Self, VoxelError> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(VoxelError::DataLength {
                shape,
                expected: n,
                actual: data.len(),
            });
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(VoxelError::InvalidSpacing(spacing));
        }
        if class_table.contains_key(&0) {
            return Err(VoxelError::UnknownLabel { label: 0 });
        }
        for &v in &data {
            if v != 0 && !class_table.contains_key(&v) {
                return Err(VoxelError::UnknownLabel { label: v });
            }
        }
        Ok(Self {
            shape,
            data,
            spacing,
            class_table,
            affine,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn class_table(&self) -> &BTreeMap<u8, String> {
        &self.class_table
    }

    pub fn affine(&self) -> [[f64; 4]; 3] {
        self.affine
    }

    #[inline]
    pub fn index(&self, l: usize, w: usize, h: usize) -> usize {
        (l * self.shape[1] + w) * self.shape[2] + h
    }

    #[inline]
    pub fn get(&self, l: usize, w: usize, h: usize) -> u8 {
        self.data[self.index(l, w, h)]
    }

    /// Voxel count per nonzero class actually present in the data.
    pub fn class_counts(&self) -> BTreeMap<u8, usize> {
        let mut counts = BTreeMap::new();
        for &v in &self.data {
            if v != 0 {
                *counts.entry(v).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Returns a copy with the given labels erased to background.
    ///
    /// The class table is left untouched: an erased class is still a
    /// known class, it just no longer occupies any voxels.
    pub fn erase_classes(&self, classes: &[u8]) -> LabelVolume {
        let mut out = self.clone();
        for v in &mut out.data {
            if classes.contains(v) {
                *v = 0;
            }
        }
        out
    }

    pub fn largest_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

/// Dense 3D occupancy grid over `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryVolume {
    shape: Shape3,
    data: Vec<u8>,
    spacing: [f64; 3],
}

impl BinaryVolume {
    pub fn new(shape: Shape3, data: Vec<u8>, spacing: [f64; 3]) -> Result<Self, VoxelError> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(VoxelError::DataLength {
                shape,
                expected: n,
                actual: data.len(),
            });
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(VoxelError::InvalidSpacing(spacing));
        }
        if let Some(&bad) = data.iter().find(|&&v| v > 1) {
            return Err(VoxelError::NotBinary(bad));
        }
        Ok(Self {
            shape,
            data,
            spacing,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// True when every foreground voxel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &BinaryVolume) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| a == 0 || b == 1)
    }
}

/// Per-class binary channel representation; channel 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotVolume {
    channels: usize,
    shape: Shape3,
    data: Vec<u8>,
    class_table: BTreeMap<u8, String>,
}

impl OneHotVolume {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    /// Channel-major data, `channels * L * W * H` entries.
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn class_table(&self) -> &BTreeMap<u8, String> {
        &self.class_table
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Inverse of [`one_hot`]: the label of the hot channel at each voxel.
    pub fn argmax(&self) -> Result<LabelVolume, VoxelError> {
        let n = self.data.len() / self.channels;
        let mut labels = vec![0u8; n];
        for c in 1..self.channels {
            let plane = &self.data[c * n..(c + 1) * n];
            for (out, &v) in labels.iter_mut().zip(plane) {
                if v == 1 {
                    *out = c as u8;
                }
            }
        }
        LabelVolume::new(self.shape, labels, [1.0; 3], self.class_table.clone())
    }
}

/// Which population a class volume fraction is measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FractionReference {
    /// All nonzero voxels of the volume. The default.
    TotalForeground,
    /// The voxel count of the single largest nonzero class.
    LargestClass,
    /// All voxels of the grid, background included.
    WholeGrid,
}

impl Default for FractionReference {
    fn default() -> Self {
        FractionReference::TotalForeground
    }
}

/// Nearest source index along one axis for output index `i` when
/// resampling a length-`n` axis to length `m`, sampling at voxel centers.
#[inline]
fn nearest_source(i: usize, n: usize, m: usize) -> usize {
    let pos = (i as f64 + 0.5) * n as f64 / m as f64;
    let idx = pos.floor() as usize;
    idx.min(n - 1)
}

fn resample_grid(data: &[u8], from: Shape3, to: Shape3) -> Vec<u8> {
    let mut out = Vec::with_capacity(to[0] * to[1] * to[2]);
    let mut src_w = vec![0usize; to[1]];
    let mut src_h = vec![0usize; to[2]];
    for (w, s) in src_w.iter_mut().enumerate() {
        *s = nearest_source(w, from[1], to[1]);
    }
    for (h, s) in src_h.iter_mut().enumerate() {
        *s = nearest_source(h, from[2], to[2]);
    }
    for l in 0..to[0] {
        let sl = nearest_source(l, from[0], to[0]);
        for &sw in &src_w {
            let row = (sl * from[1] + sw) * from[2];
            for &sh in &src_h {
                out.push(data[row + sh]);
            }
        }
    }
    out
}

fn rescale_metadata(
    spacing: [f64; 3],
    affine: [[f64; 4]; 3],
    from: Shape3,
    to: Shape3,
) -> ([f64; 3], [[f64; 4]; 3]) {
    let ratio = [
        from[0] as f64 / to[0] as f64,
        from[1] as f64 / to[1] as f64,
        from[2] as f64 / to[2] as f64,
    ];
    let spacing = [
        spacing[0] * ratio[0],
        spacing[1] * ratio[1],
        spacing[2] * ratio[2],
    ];
    // New voxel j sits at old voxel coordinate (j + 0.5) * r - 0.5, so the
    // direction columns scale by r and the translation shifts by (r - 1) / 2.
    let mut out = affine;
    for row in 0..3 {
        for axis in 0..3 {
            out[row][axis] = affine[row][axis] * ratio[axis];
            out[row][3] += affine[row][axis] * (ratio[axis] - 1.0) * 0.5;
        }
    }
    (spacing, out)
}

/// Nearest-neighbor resampling of a label volume to `target_shape`.
///
/// Never interpolates: every output voxel takes the label of its nearest
/// source voxel, so no class IDs are invented. Spacing and affine are
/// rescaled so the physical extent of the grid is preserved.
pub fn resample_labels(vol: &LabelVolume, target_shape: Shape3) -> Result<LabelVolume, VoxelError> {
    if target_shape.iter().any(|&d| d == 0) {
        return Err(VoxelError::InvalidTargetShape(target_shape));
    }
    let data = resample_grid(&vol.data, vol.shape, target_shape);
    let (spacing, affine) = rescale_metadata(vol.spacing, vol.affine, vol.shape, target_shape);
    LabelVolume::with_affine(
        target_shape,
        data,
        spacing,
        vol.class_table.clone(),
        affine,
    )
}

/// Occupancy of a label volume: 1 wherever the label is nonzero.
pub fn binarize(vol: &LabelVolume) -> BinaryVolume {
    let data = vol.data.iter().map(|&v| (v != 0) as u8).collect();
    BinaryVolume {
        shape: vol.shape,
        data,
        spacing: vol.spacing,
    }
}

/// One-hot encoding with an explicit background channel 0.
pub fn one_hot(vol: &LabelVolume, num_classes: usize) -> Result<OneHotVolume, VoxelError> {
    if num_classes < 2 {
        return Err(VoxelError::TooFewClasses(num_classes));
    }
    let n = vol.data.len();
    let mut data = vec![0u8; num_classes * n];
    for (i, &label) in vol.data.iter().enumerate() {
        let c = label as usize;
        if c >= num_classes {
            return Err(VoxelError::LabelOutOfRange { label, num_classes });
        }
        data[c * n + i] = 1;
    }
    Ok(OneHotVolume {
        channels: num_classes,
        shape: vol.shape,
        data,
        class_table: vol.class_table.clone(),
    })
}

/// Fraction of the chosen reference population occupied by `class_id`.
pub fn volume_fraction(
    vol: &LabelVolume,
    class_id: u8,
    reference: FractionReference,
) -> Result<f64, VoxelError> {
    if !vol.class_table.contains_key(&class_id) {
        return Err(VoxelError::UnknownClass(class_id));
    }
    let counts = vol.class_counts();
    let class_count = counts.get(&class_id).copied().unwrap_or(0);
    let reference_count = match reference {
        FractionReference::TotalForeground => counts.values().sum(),
        FractionReference::LargestClass => counts.values().copied().max().unwrap_or(0),
        FractionReference::WholeGrid => vol.num_voxels(),
    };
    if reference_count == 0 {
        return Err(VoxelError::EmptyReference);
    }
    Ok(class_count as f64 / reference_count as f64)
}

/// Nearest-neighbor rescaling of a binary volume; output stays in `{0, 1}`.
pub fn upscale_binary(
    vol: &BinaryVolume,
    target_shape: Shape3,
) -> Result<BinaryVolume, VoxelError> {
    if target_shape.iter().any(|&d| d == 0) {
        return Err(VoxelError::InvalidTargetShape(target_shape));
    }
    let data = resample_grid(&vol.data, vol.shape, target_shape);
    let ratio = [
        vol.shape[0] as f64 / target_shape[0] as f64,
        vol.shape[1] as f64 / target_shape[1] as f64,
        vol.shape[2] as f64 / target_shape[2] as f64,
    ];
    Ok(BinaryVolume {
        shape: target_shape,
        data,
        spacing: [
            vol.spacing[0] * ratio[0],
            vol.spacing[1] * ratio[1],
            vol.spacing[2] * ratio[2],
        ],
    })
}

#[cfg(test)]
mod tests;
