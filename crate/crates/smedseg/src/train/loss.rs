//! Segmentation loss: equal-weight soft Dice + binary cross-entropy,
//! averaged over batch and class channels.
//!
//! For probabilities `p` and one-hot targets `t` of one `(sample, class)`
//! plane with `M` pixels:
//!
//! ```text
//! dice_loss = 1 - (2 sum(p t) + eps) / (sum p + sum t + eps)     eps = 1e-5
//! bce       = -mean(t ln p' + (1 - t) ln(1 - p'))                p' clamped
//! plane     = (dice_loss + bce) / 2
//! ```
//!
//! The op is implemented as a single graph node with an analytic gradient;
//! the whole-model finite-difference test exercises it end to end.

use crate::nn::tensor::Tensor;
use crate::nn::var::{BackwardCtx, Var};

pub const DICE_EPS: f64 = 1e-5;
const LOG_CLAMP: f64 = 1e-7;

/// Builds `[N, C, H, W]` one-hot targets from label patches. Channel 0 is
/// the lung (labels 1 and 2, since findings lie inside the lung); any
/// further channel `c` marks label `c + 1`, so channel 1 is findings.
pub fn one_hot_targets(labels: &[ndarray::Array2<u8>], num_classes: usize) -> Tensor {
    let n = labels.len();
    assert!(n > 0);
    let (h, w) = labels[0].dim();
    let mut data = vec![0.0; n * num_classes * h * w];
    for (ni, plane) in labels.iter().enumerate() {
        assert_eq!(plane.dim(), (h, w), "ragged label batch");
        for ((y, x), &v) in plane.indexed_iter() {
            for c in 0..num_classes {
                let on = if c == 0 { v >= 1 } else { v == (c + 1) as u8 };
                if on {
                    data[((ni * num_classes + c) * h + y) * w + x] = 1.0;
                }
            }
        }
    }
    Tensor::from_vec(&[n, num_classes, h, w], data)
}

fn plane_sums(p: &[f64], t: &[f64]) -> (f64, f64, f64) {
    let mut sp = 0.0;
    let mut st = 0.0;
    let mut spt = 0.0;
    for (&pv, &tv) in p.iter().zip(t) {
        sp += pv;
        st += tv;
        spt += pv * tv;
    }
    (sp, st, spt)
}

/// Scalar loss over a probability batch `[N, C, H, W]` and matching one-hot
/// targets. Targets enter as data, not graph nodes.
pub fn dice_bce_loss(pred: &Var, target: &Tensor) -> Var {
    let pv = pred.value();
    assert_eq!(pv.shape(), target.shape(), "loss shape mismatch");
    let s = pv.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let m = h * w;
    let planes = n * c;

    let mut total = 0.0;
    for pi in 0..planes {
        let p = &pv.data()[pi * m..(pi + 1) * m];
        let t = &target.data()[pi * m..(pi + 1) * m];
        let (sp, st, spt) = plane_sums(p, t);
        let dice_loss = 1.0 - (2.0 * spt + DICE_EPS) / (sp + st + DICE_EPS);
        let mut bce = 0.0;
        for (&pv, &tv) in p.iter().zip(t) {
            let pc = pv.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
            bce -= tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln();
        }
        bce /= m as f64;
        total += 0.5 * (dice_loss + bce);
    }
    total /= planes as f64;
    drop(pv);

    let target_c = target.clone();
    Var::from_op(Tensor::scalar(total), &[pred], Box::new(move |ctx: &BackwardCtx| {
        let g = ctx.grad_out.item();
        let pv = ctx.parents[0].value();
        let shape = pv.shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let m = h * w;
        let planes = n * c;
        let mut grad = Tensor::zeros(&shape);
        let scale = g * 0.5 / planes as f64;
        for pi in 0..planes {
            let p = &pv.data()[pi * m..(pi + 1) * m];
            let t = &target_c.data()[pi * m..(pi + 1) * m];
            let (sp, st, spt) = plane_sums(p, t);
            let denom = sp + st + DICE_EPS;
            let numer = 2.0 * spt + DICE_EPS;
            let gslice = &mut grad.data_mut()[pi * m..(pi + 1) * m];
            for i in 0..m {
                // d dice_loss / d p_i = -(2 t_i denom - numer) / denom^2
                let ddice = -(2.0 * t[i] * denom - numer) / (denom * denom);
                // d bce / d p_i, zero where the log clamp is active
                let dbce = if p[i] > LOG_CLAMP && p[i] < 1.0 - LOG_CLAMP {
                    (p[i] - t[i]) / (p[i] * (1.0 - p[i]) * m as f64)
                } else {
                    0.0
                };
                gslice[i] = scale * (ddice + dbce);
            }
        }
        vec![Some(grad)]
    }))
}

/// Loss value without building a gradient path (validation).
pub fn loss_value(pred: &Tensor, target: &Tensor) -> f64 {
    let guard = crate::nn::NoGradGuard::new();
    let v = dice_bce_loss(&Var::constant(pred.clone()), target);
    let out = v.value().item();
    drop(guard);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn half_positive_target(n: usize, c: usize, side: usize) -> Tensor {
        // Left half of every row is positive.
        let mut data = vec![0.0; n * c * side * side];
        for plane in 0..n * c {
            for y in 0..side {
                for x in 0..side / 2 {
                    data[(plane * side + y) * side + x] = 1.0;
                }
            }
        }
        Tensor::from_vec(&[n, c, side, side], data)
    }

    #[test]
    fn perfect_prediction_is_epsilon_limited_zero() {
        let target = half_positive_target(1, 2, 16);
        let pred = Var::constant(target.clone());
        let loss = dice_bce_loss(&pred, &target).value().item();
        assert!(loss.abs() <= 1e-4, "loss {loss}");
    }

    #[test]
    fn inverted_prediction_has_unit_dice_component() {
        let target = half_positive_target(1, 1, 16);
        let inverted = target.map(|v| 1.0 - v);
        let pred = Var::constant(inverted);
        // Extract the soft-Dice component by recomputing it directly.
        let m = 256.0;
        let (sp, st, spt) = (m / 2.0, m / 2.0, 0.0);
        let dice_loss = 1.0 - (2.0 * spt + DICE_EPS) / (sp + st + DICE_EPS);
        assert!((dice_loss - 1.0).abs() < 1e-7);
        // And the combined loss is dominated by saturated BCE.
        let loss = dice_bce_loss(&pred, &target).value().item();
        assert!(loss > 2.0, "loss {loss}");
    }

    #[test]
    fn uniform_half_prediction_matches_closed_form() {
        // Independent closed-form evaluation of the same quantities: with
        // p = 0.5 everywhere and half the pixels positive,
        //   sum(pt) = M/4, sum p = sum t = M/2,
        //   dice_loss = 1 - (M/2 + eps) / (M + eps),   bce = ln 2.
        for side in [16usize, 64] {
            let m = (side * side) as f64;
            let dice_loss = 1.0 - (m / 2.0 + DICE_EPS) / (m + DICE_EPS);
            let expected = 0.5 * (dice_loss + std::f64::consts::LN_2);
            let target = half_positive_target(2, 2, side);
            let pred = Var::constant(Tensor::full(&[2, 2, side, side], 0.5));
            let loss = dice_bce_loss(&pred, &target).value().item();
            assert!(
                (loss - expected).abs() < 1e-12,
                "side {side}: {loss} vs {expected}"
            );
        }
        // Spot value pinned from a high-precision evaluation (64x64 plane).
        let target = half_positive_target(1, 1, 64);
        let pred = Var::constant(Tensor::full(&[1, 1, 64, 64], 0.5));
        let loss = dice_bce_loss(&pred, &target).value().item();
        assert!((loss - 0.59657358966962109).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let side = 6;
        let target = half_positive_target(1, 2, side);
        let n = 2 * side * side;
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let pred = Var::parameter(Tensor::from_vec(&[1, 2, side, side], probs.clone()));
        let loss = dice_bce_loss(&pred, &target);
        loss.backward();
        let analytic = pred.grad().unwrap();

        let h = 1e-6;
        for i in (0..n).step_by(7) {
            let eval = |v: f64| {
                let mut p = probs.clone();
                p[i] = v;
                loss_value(&Tensor::from_vec(&[1, 2, side, side], p), &target)
            };
            let fd = (eval(probs[i] + h) - eval(probs[i] - h)) / (2.0 * h);
            let an = analytic.data()[i];
            assert!(
                (an - fd).abs() / an.abs().max(fd.abs()).max(1e-9) < 1e-4,
                "elem {i}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn one_hot_encoding_respects_hierarchy() {
        let mut labels = ndarray::Array2::<u8>::zeros((2, 2));
        labels[(0, 0)] = 1; // lung only
        labels[(1, 1)] = 2; // findings (inside lung)
        let t = one_hot_targets(&[labels], 2);
        // lung channel: both labeled voxels
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[3], 1.0);
        // findings channel: only the label-2 voxel
        assert_eq!(t.data()[4], 0.0);
        assert_eq!(t.data()[7], 1.0);
    }
}
