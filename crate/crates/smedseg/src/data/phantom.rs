//! Synthetic chest phantoms for desk-scale experiments.
//!
//! Each phantom is an elliptic body (~0 HU soft tissue) in air (-1000 HU)
//! containing two lung ellipsoids (~-800 HU, label 1) with a few brighter
//! lesion blobs (~-100 HU, label 2) placed strictly inside the lungs, plus
//! mild Gaussian noise. Findings are a subset of the lung by construction.
//!
//! The geometry is intensity-separable on purpose: a small network must be
//! able to overfit these volumes quickly, which is what the learnability
//! tests rely on.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::init::standard_normal;

use super::{CtVolume, DataError, LabelVolume};

const HU_AIR: f32 = -1000.0;
const HU_BODY: f32 = 0.0;
const HU_LUNG: f32 = -800.0;
const HU_FINDING: f32 = -100.0;
const NOISE_STD: f64 = 10.0;

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let dz = (z as f64 - self.center[0]) / self.semi[0];
        let dy = (y as f64 - self.center[1]) / self.semi[1];
        let dx = (x as f64 - self.center[2]) / self.semi[2];
        dz * dz + dy * dy + dx * dx <= 1.0
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: f64, rel: f64) -> f64 {
    base * (1.0 + rng.random_range(-rel..rel))
}

/// Lesion blob fully contained in `lung`: per axis, the blob's center offset
/// plus its extent stays inside 95% of the lung semi-axis.
fn finding_inside(rng: &mut ChaCha8Rng, lung: &Ellipsoid) -> Ellipsoid {
    let semi = [
        lung.semi[0] * rng.random_range(0.30..0.50),
        lung.semi[1] * rng.random_range(0.25..0.40),
        lung.semi[2] * rng.random_range(0.25..0.40),
    ];
    let mut center = [0.0; 3];
    for a in 0..3 {
        let margin = 0.95 - semi[a] / lung.semi[a];
        let off = rng.random_range(-margin..margin) * lung.semi[a];
        center[a] = lung.center[a] + off;
    }
    Ellipsoid { center, semi }
}

/// Generates `n_volumes` (CT, label) pairs of the given `(slices, height,
/// width)` shape. Fully deterministic given the RNG state.
pub fn make_phantom_dataset(
    n_volumes: usize,
    shape: (usize, usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(CtVolume, LabelVolume)>, DataError> {
    let (nz, ny, nx) = shape;
    if nz < 8 || ny < 64 || nx < 64 {
        return Err(DataError::PhantomTooSmall(shape));
    }
    let mut out = Vec::with_capacity(n_volumes);
    for vi in 0..n_volumes {
        let body = Ellipsoid {
            center: [nz as f64 / 2.0, ny as f64 * 0.52, nx as f64 / 2.0],
            semi: [nz as f64 * 10.0, ny as f64 * 0.44, nx as f64 * 0.46],
        };
        let lungs: Vec<Ellipsoid> = [0.30, 0.70]
            .iter()
            .map(|&cx| Ellipsoid {
                center: [
                    jitter(rng, nz as f64 * 0.5, 0.05),
                    jitter(rng, ny as f64 * 0.52, 0.05),
                    jitter(rng, nx as f64 * cx, 0.05),
                ],
                semi: [
                    jitter(rng, nz as f64 * 0.42, 0.08),
                    jitter(rng, ny as f64 * 0.30, 0.08),
                    jitter(rng, nx as f64 * 0.17, 0.08),
                ],
            })
            .collect();
        let n_blobs = rng.random_range(1..=3);
        let findings: Vec<Ellipsoid> = (0..n_blobs)
            .map(|_| {
                let side = rng.random_range(0..2usize);
                finding_inside(rng, &lungs[side])
            })
            .collect();

        let mut intensities = Array3::<f32>::zeros((nz, ny, nx));
        let mut labels = Array3::<u8>::zeros((nz, ny, nx));
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let in_lung = lungs.iter().any(|l| l.contains(z, y, x));
                    let in_finding = in_lung && findings.iter().any(|f| f.contains(z, y, x));
                    let base = if in_finding {
                        HU_FINDING
                    } else if in_lung {
                        HU_LUNG
                    } else if body.contains(z, y, x) {
                        HU_BODY
                    } else {
                        HU_AIR
                    };
                    intensities[(z, y, x)] =
                        base + (standard_normal(rng) * NOISE_STD) as f32;
                    labels[(z, y, x)] = if in_finding {
                        LabelVolume::FINDINGS
                    } else if in_lung {
                        LabelVolume::LUNG
                    } else {
                        LabelVolume::BACKGROUND
                    };
                }
            }
        }
        let ct = CtVolume::new(intensities, [2.0, 1.0, 1.0], format!("phantom_{vi:03}"))?;
        out.push((ct, LabelVolume::new(labels)?));
    }
    Ok(out)
}

/// Lobe codes used by [`phantom_lobes`] and the radiomics CLI: coded label
/// volumes store LUL=1, LLL=2, RUL=3, RML=4, RLL=5.
pub const LOBE_CODES: [(&str, u8); 5] =
    [("LUL", 1), ("LLL", 2), ("RUL", 3), ("RML", 4), ("RLL", 5)];

/// Partitions a phantom's lung voxels into five synthetic lobes by side and
/// axial band: the left lung splits into upper/lower halves, the right into
/// upper/middle/lower thirds. Every lung voxel receives exactly one code,
/// so the lobes exactly partition the lung.
pub fn phantom_lobes(labels: &LabelVolume) -> Array3<u8> {
    let (nz, ny, nx) = labels.shape();
    let mut lobes = Array3::<u8>::zeros((nz, ny, nx));
    // z-extent per side (left: x < nx/2).
    let mut z_range = [(usize::MAX, 0usize); 2];
    for ((z, _, x), &v) in labels.labels.indexed_iter() {
        if v >= LabelVolume::LUNG {
            let side = usize::from(x >= nx / 2);
            z_range[side].0 = z_range[side].0.min(z);
            z_range[side].1 = z_range[side].1.max(z);
        }
    }
    for ((z, y, x), &v) in labels.labels.indexed_iter() {
        if v < LabelVolume::LUNG {
            continue;
        }
        let side = usize::from(x >= nx / 2);
        let (zmin, zmax) = z_range[side];
        let extent = zmax - zmin + 1;
        let code = if side == 0 {
            // Left lung: lower half LLL, upper half LUL (z grows superior).
            let band = (z - zmin) * 2 / extent;
            if band == 0 { 2 } else { 1 }
        } else {
            // Right lung: thirds RLL / RML / RUL.
            let band = (z - zmin) * 3 / extent;
            match band {
                0 => 5,
                1 => 4,
                _ => 3,
            }
        };
        lobes[(z, y, x)] = code;
    }
    lobes
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn findings_are_strictly_inside_lungs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = make_phantom_dataset(4, (12, 64, 64), &mut rng).unwrap();
        for (_, labels) in &pairs {
            let mut findings = 0usize;
            for &v in labels.labels.iter() {
                if v == LabelVolume::FINDINGS {
                    findings += 1;
                }
            }
            assert!(findings > 0, "every phantom carries findings");
            // findings_mask is a subset of lung_mask by label construction;
            // check the hierarchy explicitly through the masks.
            let lung = labels.lung_mask();
            for (idx, &f) in labels.findings_mask().indexed_iter() {
                if f {
                    assert!(lung[idx]);
                }
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let pa = make_phantom_dataset(2, (8, 64, 64), &mut a).unwrap();
        let pb = make_phantom_dataset(2, (8, 64, 64), &mut b).unwrap();
        for ((ca, la), (cb, lb)) in pa.iter().zip(&pb) {
            assert_eq!(ca.intensities, cb.intensities);
            assert_eq!(la.labels, lb.labels);
        }
    }

    #[test]
    fn eight_volumes_of_sixteen_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs = make_phantom_dataset(8, (16, 64, 64), &mut rng).unwrap();
        assert_eq!(pairs.len(), 8);
        let total_slices: usize = pairs.iter().map(|(ct, _)| ct.num_slices()).sum();
        assert_eq!(total_slices, 128);
    }

    #[test]
    fn undersized_shape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            make_phantom_dataset(1, (4, 64, 64), &mut rng),
            Err(DataError::PhantomTooSmall(_))
        ));
    }

    #[test]
    fn lobes_partition_the_lung_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, labels) = make_phantom_dataset(1, (12, 64, 64), &mut rng)
            .unwrap()
            .pop()
            .unwrap();
        let lobes = phantom_lobes(&labels);
        let mut lobe_total = 0usize;
        let mut lung_total = 0usize;
        for (idx, &v) in labels.labels.indexed_iter() {
            let coded = lobes[idx];
            if v >= LabelVolume::LUNG {
                lung_total += 1;
                assert!((1..=5).contains(&coded), "lung voxel without lobe");
            } else {
                assert_eq!(coded, 0, "lobe outside lung");
            }
            if coded > 0 {
                lobe_total += 1;
            }
        }
        assert_eq!(lobe_total, lung_total);
        // All five lobes are populated.
        for code in 1..=5u8 {
            assert!(lobes.iter().any(|&v| v == code), "lobe {code} empty");
        }
    }
}
