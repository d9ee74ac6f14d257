//! 2.5D slice samples and random patch extraction.
//!
//! Each axial slice `i` yields one sample whose network input stacks slices
//! `(i-1, i, i+1)` as channels — inferior, center, superior — with edge
//! replication at the volume boundaries. The center slice's labels are the
//! prediction target.

use ndarray::ArrayView2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::InputPatch;
use crate::nn::Tensor;

use super::{CtVolume, DataError, LabelVolume};

/// One training/validation sample: a view over a volume centered on one
/// axial slice.
#[derive(Clone, Copy)]
pub struct SliceSample<'a> {
    pub ct: &'a CtVolume,
    pub labels: &'a LabelVolume,
    /// Center slice index.
    pub index: usize,
    /// True when any voxel of the center slice is labeled lung or findings.
    pub has_annotation: bool,
}

impl<'a> SliceSample<'a> {
    /// Source slice indices for the three channels, replicating edges
    /// (slice -1 := slice 0, slice N := slice N-1).
    fn channel_slices(&self) -> [usize; 3] {
        let n = self.ct.num_slices();
        [
            self.index.saturating_sub(1),
            self.index,
            (self.index + 1).min(n - 1),
        ]
    }

    /// Full-slice 2.5D input `[3, height, width]` in raw Hounsfield units.
    pub fn triplet(&self) -> Tensor {
        let (_, h, w) = self.ct.shape();
        let mut data = Vec::with_capacity(3 * h * w);
        for zi in self.channel_slices() {
            data.extend(
                self.ct
                    .intensities
                    .index_axis(ndarray::Axis(0), zi)
                    .iter()
                    .map(|&v| v as f64),
            );
        }
        Tensor::from_vec(&[3, h, w], data)
    }

    /// Label slice of the center slice.
    pub fn target(&self) -> ArrayView2<'a, u8> {
        self.labels.labels.index_axis(ndarray::Axis(0), self.index)
    }

    /// Cropped 2.5D input and label window with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size: usize) -> (Tensor, ndarray::Array2<u8>) {
        let (_, _, w) = self.ct.shape();
        let mut data = Vec::with_capacity(3 * size * size);
        for zi in self.channel_slices() {
            let plane = self.ct.intensities.index_axis(ndarray::Axis(0), zi);
            let flat = plane.as_slice().expect("contiguous slice");
            for y in top..top + size {
                let row = y * w + left;
                data.extend(flat[row..row + size].iter().map(|&v| v as f64));
            }
        }
        let input = Tensor::from_vec(&[3, size, size], data);
        let target = self
            .target()
            .slice(ndarray::s![top..top + size, left..left + size])
            .to_owned();
        (input, target)
    }
}

/// Builds one sample per axial slice; with `swa` (slices-with-annotation),
/// samples whose center slice carries no annotation are dropped.
pub fn make_slice_samples<'a>(
    ct: &'a CtVolume,
    labels: &'a LabelVolume,
    swa: bool,
) -> Result<Vec<SliceSample<'a>>, DataError> {
    labels.check_paired(ct)?;
    let samples = (0..ct.num_slices())
        .map(|index| {
            let has_annotation = labels
                .labels
                .index_axis(ndarray::Axis(0), index)
                .iter()
                .any(|&v| v > 0);
            SliceSample { ct, labels, index, has_annotation }
        })
        .filter(|s| !swa || s.has_annotation)
        .collect();
    Ok(samples)
}

/// Extracts a uniformly random square patch (image channels and target
/// cropped identically). The corner distribution is uniform over all valid
/// top-left positions.
pub fn sample_patch(
    sample: &SliceSample,
    patch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(InputPatch, ndarray::Array2<u8>), DataError> {
    let (_, h, w) = sample.ct.shape();
    if patch_size > h || patch_size > w || patch_size == 0 {
        return Err(DataError::PatchTooLarge { patch: patch_size, height: h, width: w });
    }
    let top = rng.random_range(0..=h - patch_size);
    let left = rng.random_range(0..=w - patch_size);
    let (input, target) = sample.crop(top, left, patch_size);
    let patch = InputPatch::new(input).expect("validated volume yields valid patches");
    Ok((patch, target))
}
