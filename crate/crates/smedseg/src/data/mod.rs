//! Volumetric CT data handling: loading (NIfTI-1 or a raw JSON+binary
//! fallback), 2.5D slice-triplet assembly, random patch extraction,
//! subject-level train/validation splits, and synthetic phantom volumes.
//!
//! Intensities are carried through unchanged: no windowing, clipping, or
//! normalization happens anywhere in this pipeline — networks see raw
//! Hounsfield units.
//!
//! Volumes are immutable after load; patch samplers are free to run as
//! concurrent readers as long as each owns its own RNG stream.

pub mod io;
pub mod nifti;
pub mod phantom;
pub mod slices;
pub mod split;

use std::path::PathBuf;

use ndarray::Array3;
use thiserror::Error;

pub use io::{list_dataset, load_volume, save_labels, save_volume};
pub use phantom::{make_phantom_dataset, phantom_lobes};
pub use slices::{make_slice_samples, sample_patch, SliceSample};
pub use split::{split_subjects, split_subjects_grouped, SplitManifest};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {detail}")]
    HeaderParse { path: PathBuf, detail: String },
    #[error("unsupported volume format: {0} (expected .nii, .nii.gz, or .json)")]
    UnsupportedFormat(PathBuf),
    #[error("label volume shape {label:?} does not match image shape {image:?}")]
    LabelShapeMismatch { image: Vec<usize>, label: Vec<usize> },
    #[error("label volume {path} contains value {value}, outside {{0, 1, 2}}")]
    InvalidLabels { path: PathBuf, value: u8 },
    #[error("volume {0} contains non-finite intensities")]
    NonFiniteIntensities(String),
    #[error("volume {0} has non-positive voxel spacing")]
    InvalidSpacing(String),
    #[error("patch size {patch} exceeds slice dimensions {height}x{width}")]
    PatchTooLarge { patch: usize, height: usize, width: usize },
    #[error("need at least 2 subjects to split, got {0}")]
    TooFewSubjects(usize),
    #[error("phantom shape {0:?} is below the supported minimum (8, 64, 64)")]
    PhantomTooSmall((usize, usize, usize)),
}

impl DataError {
    fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }

    fn header(path: &std::path::Path, detail: &str) -> Self {
        DataError::HeaderParse { path: path.to_path_buf(), detail: detail.to_string() }
    }
}

/// A CT volume: Hounsfield-unit intensities in `(slices, height, width)`
/// order plus voxel spacing `(dz, dy, dx)` in millimeters.
#[derive(Clone, Debug)]
pub struct CtVolume {
    pub intensities: Array3<f32>,
    pub spacing: [f64; 3],
    pub subject_id: String,
}

impl CtVolume {
    pub fn new(
        intensities: Array3<f32>,
        spacing: [f64; 3],
        subject_id: impl Into<String>,
    ) -> Result<Self, DataError> {
        let subject_id = subject_id.into();
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(DataError::InvalidSpacing(subject_id));
        }
        if intensities.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFiniteIntensities(subject_id));
        }
        Ok(CtVolume { intensities, spacing, subject_id })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.intensities.dim()
    }

    pub fn num_slices(&self) -> usize {
        self.intensities.dim().0
    }
}

/// Per-voxel categorical labels paired with a [`CtVolume`]:
/// 0 background, 1 lung, 2 findings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    pub labels: Array3<u8>,
}

impl LabelVolume {
    pub const BACKGROUND: u8 = 0;
    pub const LUNG: u8 = 1;
    pub const FINDINGS: u8 = 2;

    pub fn new(labels: Array3<u8>) -> Result<Self, DataError> {
        if let Some(&bad) = labels.iter().find(|&&v| v > 2) {
            return Err(DataError::InvalidLabels { path: PathBuf::new(), value: bad });
        }
        Ok(LabelVolume { labels })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    /// Boolean mask of the lung region (labels 1 and 2 — findings lie inside
    /// the lung).
    pub fn lung_mask(&self) -> Array3<bool> {
        self.labels.map(|&v| v >= Self::LUNG)
    }

    /// Boolean mask of the findings region (label 2).
    pub fn findings_mask(&self) -> Array3<bool> {
        self.labels.map(|&v| v == Self::FINDINGS)
    }

    fn check_paired(&self, ct: &CtVolume) -> Result<(), DataError> {
        if self.labels.dim() != ct.intensities.dim() {
            let (iz, iy, ix) = ct.intensities.dim();
            let (lz, ly, lx) = self.labels.dim();
            return Err(DataError::LabelShapeMismatch {
                image: vec![iz, iy, ix],
                label: vec![lz, ly, lx],
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ct_volume_rejects_bad_spacing_and_nan() {
        let arr = Array3::<f32>::zeros((2, 4, 4));
        assert!(CtVolume::new(arr.clone(), [0.0, 1.0, 1.0], "s").is_err());
        let mut bad = arr;
        bad[(0, 0, 0)] = f32::NAN;
        assert!(CtVolume::new(bad, [1.0, 1.0, 1.0], "s").is_err());
    }

    #[test]
    fn label_volume_rejects_out_of_range_values() {
        let mut arr = Array3::<u8>::zeros((2, 2, 2));
        arr[(0, 0, 0)] = 3;
        assert!(LabelVolume::new(arr).is_err());
    }

    #[test]
    fn masks_follow_label_hierarchy() {
        let mut arr = Array3::<u8>::zeros((1, 1, 3));
        arr[(0, 0, 1)] = 1;
        arr[(0, 0, 2)] = 2;
        let labels = LabelVolume::new(arr).unwrap();
        assert_eq!(
            labels.lung_mask().iter().copied().collect::<Vec<_>>(),
            vec![false, true, true]
        );
        assert_eq!(
            labels.findings_mask().iter().copied().collect::<Vec<_>>(),
            vec![false, false, true]
        );
    }
}
