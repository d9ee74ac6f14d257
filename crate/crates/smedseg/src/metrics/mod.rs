//! Volume-level segmentation metrics and run comparison.
//!
//! All metric functions are pure; [`volume_predict`] requires a read-only
//! model and is otherwise safe to call from multiple threads on replica
//! instances.

pub mod wilcoxon;

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CtVolume, LabelVolume};
use crate::model::{Model, ModelError};
use crate::nn::layers::Mode;
use crate::nn::{NoGradGuard, Tensor};

pub use wilcoxon::{rank_sum_detailed, wilcoxon_rank_sum, PvalueMethod};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("mask shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("ground-truth mask is empty; error rates are undefined")]
    EmptyGroundTruth,
    #[error("statistical comparison needs at least one observation per sample")]
    EmptySample,
    #[error("scores contain non-finite values")]
    NonFiniteScore,
    #[error("reports cover different subject sets")]
    SubjectSetMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A binary 3-d mask plus voxel spacing.
#[derive(Clone, Debug)]
pub struct BinaryMask3D {
    pub mask: Array3<bool>,
    pub spacing: [f64; 3],
}

impl BinaryMask3D {
    pub fn new(mask: Array3<bool>, spacing: [f64; 3]) -> Self {
        BinaryMask3D { mask, spacing }
    }

    /// Lung mask (labels 1 and 2) of a label volume.
    pub fn lung_from(labels: &LabelVolume, spacing: [f64; 3]) -> Self {
        BinaryMask3D::new(labels.lung_mask(), spacing)
    }

    /// Findings mask (label 2) of a label volume.
    pub fn findings_from(labels: &LabelVolume, spacing: [f64; 3]) -> Self {
        BinaryMask3D::new(labels.findings_mask(), spacing)
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&v| v).count()
    }

    fn check_shapes(&self, other: &BinaryMask3D) -> Result<(), MetricError> {
        if self.mask.dim() != other.mask.dim() {
            let (az, ay, ax) = self.mask.dim();
            let (bz, by, bx) = other.mask.dim();
            return Err(MetricError::ShapeMismatch {
                a: vec![az, ay, ax],
                b: vec![bz, by, bx],
            });
        }
        Ok(())
    }
}

/// 3-d Dice overlap `2|A∩B| / (|A| + |B|)`; two empty masks score 1.0 by
/// convention so finding-free subjects do not produce NaN.
pub fn dice(a: &BinaryMask3D, b: &BinaryMask3D) -> Result<f64, MetricError> {
    a.check_shapes(b)?;
    let mut na = 0usize;
    let mut nb = 0usize;
    let mut inter = 0usize;
    for (&va, &vb) in a.mask.iter().zip(b.mask.iter()) {
        na += va as usize;
        nb += vb as usize;
        inter += (va && vb) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// False-positive and false-negative error rates, both normalized by the
/// ground-truth volume: `fp = |P\G| / |G|`, `fn = |G\P| / |G|`. This makes
/// the two rates commensurable and recovers Dice through
/// `dice = 2(1-fn) / (2 - fn + fp)`.
pub fn error_rates(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<(f64, f64), MetricError> {
    pred.check_shapes(gt)?;
    let mut g = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (&p, &t) in pred.mask.iter().zip(gt.mask.iter()) {
        g += t as usize;
        fp += (p && !t) as usize;
        fneg += (!p && t) as usize;
    }
    if g == 0 {
        return Err(MetricError::EmptyGroundTruth);
    }
    Ok((fp as f64 / g as f64, fneg as f64 / g as f64))
}

/// Edge-replicates a `[3, h, w]` tensor up to spatial multiples of `mult`.
fn pad_to_multiple(t: &Tensor, mult: usize) -> (Tensor, usize, usize) {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let hp = h.div_ceil(mult) * mult;
    let wp = w.div_ceil(mult) * mult;
    if hp == h && wp == w {
        return (t.clone(), h, w);
    }
    let mut out = Tensor::zeros(&[c, hp, wp]);
    for ci in 0..c {
        for y in 0..hp {
            let sy = y.min(h - 1);
            for x in 0..wp {
                let sx = x.min(w - 1);
                out.data_mut()[(ci * hp + y) * wp + x] = t.data()[(ci * h + sy) * w + sx];
            }
        }
    }
    (out, h, w)
}

/// Runs the model over every axial slice triplet at full resolution
/// (edge-padding to the model's size granularity when needed), thresholds
/// the per-class sigmoids at 0.5, and stacks the center-slice predictions
/// into a label volume. Findings are intersected with the lung mask, so
/// `findings ⊆ lung` holds in the output.
pub fn volume_predict(model: &Model, ct: &CtVolume) -> Result<LabelVolume, MetricError> {
    let _guard = NoGradGuard::new();
    let (nz, ny, nx) = ct.shape();
    let mult = model.config().required_multiple();
    let mut labels = Array3::<u8>::zeros((nz, ny, nx));
    for zi in 0..nz {
        let mut data = Vec::with_capacity(3 * ny * nx);
        for src in [zi.saturating_sub(1), zi, (zi + 1).min(nz - 1)] {
            data.extend(
                ct.intensities
                    .index_axis(ndarray::Axis(0), src)
                    .iter()
                    .map(|&v| v as f64),
            );
        }
        let triplet = Tensor::from_vec(&[3, ny, nx], data);
        let (padded, oh, ow) = pad_to_multiple(&triplet, mult);
        let (hp, wp) = (padded.shape()[1], padded.shape()[2]);
        let batch = padded.reshaped(&[1, 3, hp, wp]);
        let out = model.forward_batch(&batch, Mode::Eval)?;
        let probs = out.value();
        let classes = probs.shape()[1];
        for y in 0..oh {
            for x in 0..ow {
                let lung = probs.data()[(y * wp) + x] > 0.5;
                let finding = classes > 1 && probs.data()[(hp * wp) + (y * wp) + x] > 0.5;
                labels[(zi, y, x)] = if lung && finding {
                    LabelVolume::FINDINGS
                } else if lung {
                    LabelVolume::LUNG
                } else {
                    LabelVolume::BACKGROUND
                };
            }
        }
    }
    Ok(LabelVolume::new(labels).expect("constructed labels are in range"))
}

/// Per-volume Dice scores with their mean and sample standard deviation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_volume: Vec<(String, f64)>,
    pub mean: f64,
    pub std: f64,
}

impl DiceReport {
    pub fn from_scores(per_volume: Vec<(String, f64)>) -> Self {
        let n = per_volume.len();
        let mean = if n == 0 {
            f64::NAN
        } else {
            per_volume.iter().map(|(_, d)| d).sum::<f64>() / n as f64
        };
        let std = if n < 2 {
            0.0
        } else {
            let ss: f64 = per_volume.iter().map(|(_, d)| (d - mean) * (d - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        };
        DiceReport { per_volume, mean, std }
    }

    pub fn scores(&self) -> Vec<f64> {
        self.per_volume.iter().map(|(_, d)| *d).collect()
    }

    /// `subject_id, dice` rows.
    pub fn write_csv(&self, path: &Path) -> Result<(), MetricError> {
        let mut out = String::from("subject_id,dice\n");
        for (id, d) in &self.per_volume {
            out.push_str(&format!("{id},{d}\n"));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "mean": self.mean,
            "std": self.std,
            "n": self.per_volume.len(),
        })
    }
}

/// Wilcoxon rank-sum p-value between two runs' per-volume Dice lists. The
/// reports must cover the same subjects.
pub fn compare_runs(a: &DiceReport, b: &DiceReport) -> Result<f64, MetricError> {
    let mut ia: Vec<&String> = a.per_volume.iter().map(|(s, _)| s).collect();
    let mut ib: Vec<&String> = b.per_volume.iter().map(|(s, _)| s).collect();
    ia.sort();
    ib.sort();
    if ia != ib {
        return Err(MetricError::SubjectSetMismatch);
    }
    let (_, p) = wilcoxon_rank_sum(&a.scores(), &b.scores())?;
    Ok(p)
}
