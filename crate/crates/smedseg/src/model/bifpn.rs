//! Bidirectional feature pyramid with fast normalized fusion.
//!
//! Raw backbone features are first projected to a uniform channel count by
//! 1x1 lateral convolutions. Each repeat then runs one top-down pass
//! (nearest 2x upsampling of the coarser level) and one bottom-up pass
//! (max-pool downsampling of the finer level). Every fusion node owns
//! learnable non-negative weights normalized as `relu(w_i) / (sum + eps)`,
//! and is followed by swish, a depthwise separable convolution, and batch
//! norm.

use rand_chacha::ChaCha8Rng;

use crate::nn::layers::{BatchNorm2d, Conv2d, DwSepConv, Mode, NamedTensor, Visitor};
use crate::nn::ops::{self, ConvSpec};
use crate::nn::{Tensor, Var};

/// Stabilizer in the fusion denominator. Small enough that freshly
/// initialized weights (all ones) still sum to 1 within 1e-6 after
/// normalization.
pub const FUSION_EPS: f64 = 1e-6;

struct FusionNode {
    weights: Var,
    conv: DwSepConv,
    bn: BatchNorm2d,
}

impl FusionNode {
    fn new(rng: &mut ChaCha8Rng, inputs: usize, channels: usize) -> Self {
        FusionNode {
            weights: Var::parameter(Tensor::full(&[inputs], 1.0)),
            conv: DwSepConv::new(rng, channels, channels, 3, 1, 1),
            bn: BatchNorm2d::new(channels),
        }
    }

    fn forward(&self, inputs: &[&Var], mode: Mode) -> Var {
        let fused = ops::weighted_fusion(inputs, &self.weights, FUSION_EPS);
        self.bn.forward(&self.conv.forward(&ops::swish(&fused)), mode)
    }

    /// Normalized fusion coefficients as currently parameterized.
    fn normalized_weights(&self) -> Vec<f64> {
        let w = self.weights.value();
        let a: Vec<f64> = w.data().iter().map(|&x| x.max(0.0)).collect();
        let denom = a.iter().sum::<f64>() + FUSION_EPS;
        a.iter().map(|&x| x / denom).collect()
    }

    fn visit<'b>(&'b self, prefix: &str, v: Visitor<'_, 'b>) {
        v(format!("{prefix}.weights"), NamedTensor::Param(&self.weights));
        self.conv.visit(&format!("{prefix}.conv"), v);
        self.bn.visit(&format!("{prefix}.bn"), v);
    }
}

struct BiFpnLayer {
    /// Top-down nodes for levels `0..L-1`, each fusing the level input with
    /// the upsampled coarser result.
    td_nodes: Vec<FusionNode>,
    /// Bottom-up nodes for levels `1..L`; interior levels fuse three inputs
    /// (level input, top-down result, downsampled finer result), the
    /// coarsest fuses two.
    bu_nodes: Vec<FusionNode>,
}

impl BiFpnLayer {
    fn new(rng: &mut ChaCha8Rng, levels: usize, channels: usize) -> Self {
        let td_nodes = (0..levels.saturating_sub(1))
            .map(|_| FusionNode::new(rng, 2, channels))
            .collect();
        let bu_nodes = (1..levels)
            .map(|k| FusionNode::new(rng, if k < levels - 1 { 3 } else { 2 }, channels))
            .collect();
        BiFpnLayer { td_nodes, bu_nodes }
    }

    fn forward(&self, inputs: &[Var], mode: Mode) -> Vec<Var> {
        let levels = inputs.len();
        if levels == 1 {
            return inputs.to_vec();
        }
        // Top-down sweep, coarse to fine.
        let mut td: Vec<Option<Var>> = vec![None; levels];
        td[levels - 1] = Some(inputs[levels - 1].clone());
        for k in (0..levels - 1).rev() {
            let coarser = ops::nearest_upsample2x(td[k + 1].as_ref().unwrap());
            td[k] = Some(self.td_nodes[k].forward(&[&inputs[k], &coarser], mode));
        }
        // Bottom-up sweep, fine to coarse.
        let mut out: Vec<Var> = Vec::with_capacity(levels);
        out.push(td[0].clone().unwrap());
        for k in 1..levels {
            let finer = ops::max_pool2d(&out[k - 1], 3, 2, 1);
            let node = &self.bu_nodes[k - 1];
            let fused = if k < levels - 1 {
                node.forward(&[&inputs[k], td[k].as_ref().unwrap(), &finer], mode)
            } else {
                node.forward(&[&inputs[k], &finer], mode)
            };
            out.push(fused);
        }
        out
    }
}

pub struct BiFpn {
    lateral: Vec<(Conv2d, BatchNorm2d)>,
    layers: Vec<BiFpnLayer>,
}

impl BiFpn {
    pub fn new(
        rng: &mut ChaCha8Rng,
        input_channels: &[usize],
        channels: usize,
        repeats: usize,
    ) -> Self {
        let lateral = input_channels
            .iter()
            .map(|&in_ch| {
                (
                    Conv2d::new(rng, in_ch, channels, 1, ConvSpec::default(), true),
                    BatchNorm2d::new(channels),
                )
            })
            .collect();
        let layers = (0..repeats)
            .map(|_| BiFpnLayer::new(rng, input_channels.len(), channels))
            .collect();
        BiFpn { lateral, layers }
    }

    pub fn levels(&self) -> usize {
        self.lateral.len()
    }

    pub fn forward(&self, raw: &[Var], mode: Mode) -> Vec<Var> {
        assert_eq!(raw.len(), self.lateral.len(), "level count mismatch");
        let mut cur: Vec<Var> = raw
            .iter()
            .zip(&self.lateral)
            .map(|(f, (conv, bn))| bn.forward(&conv.forward(f), mode))
            .collect();
        for layer in &self.layers {
            cur = layer.forward(&cur, mode);
        }
        cur
    }

    /// Normalized fusion weights of every node in every repeat, for
    /// inspection.
    pub fn fusion_weight_sets(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .flat_map(|layer| {
                layer
                    .td_nodes
                    .iter()
                    .chain(layer.bu_nodes.iter())
                    .map(|n| n.normalized_weights())
            })
            .collect()
    }

    pub fn visit<'b>(&'b self, prefix: &str, v: Visitor<'_, 'b>) {
        for (i, (conv, bn)) in self.lateral.iter().enumerate() {
            conv.visit(&format!("{prefix}.lateral.{i}.conv"), v);
            bn.visit(&format!("{prefix}.lateral.{i}.bn"), v);
        }
        for (li, layer) in self.layers.iter().enumerate() {
            for (k, node) in layer.td_nodes.iter().enumerate() {
                node.visit(&format!("{prefix}.layers.{li}.td.{k}"), v);
            }
            for (k, node) in layer.bu_nodes.iter().enumerate() {
                node.visit(&format!("{prefix}.layers.{li}.bu.{k}"), v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn pyramid_input(channels: &[usize], top_size: usize) -> Vec<Var> {
        channels
            .iter()
            .enumerate()
            .map(|(k, &c)| Var::constant(Tensor::full(&[1, c, top_size >> k, top_size >> k], 0.5)))
            .collect()
    }

    #[test]
    fn output_levels_are_uniform_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let widths = [10, 20, 30, 40, 50];
        let bifpn = BiFpn::new(&mut rng, &widths, 16, 2);
        let raw = pyramid_input(&widths, 32);
        let out = bifpn.forward(&raw, Mode::Eval);
        assert_eq!(out.len(), 5);
        for (k, level) in out.iter().enumerate() {
            assert_eq!(level.shape(), vec![1, 16, 32 >> k, 32 >> k]);
        }
    }

    #[test]
    fn fresh_fusion_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bifpn = BiFpn::new(&mut rng, &[8, 8, 8], 8, 3);
        for set in bifpn.fusion_weight_sets() {
            let sum: f64 = set.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "weights sum {sum}");
            assert!(set.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn single_level_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bifpn = BiFpn::new(&mut rng, &[8], 8, 2);
        let raw = pyramid_input(&[8], 4);
        let out = bifpn.forward(&raw, Mode::Eval);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].shape(), vec![1, 8, 4, 4]);
    }

    #[test]
    #[should_panic(expected = "level count mismatch")]
    fn wrong_level_count_panics_internally() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bifpn = BiFpn::new(&mut rng, &[8, 8, 8, 8, 8], 8, 1);
        let raw = pyramid_input(&[8, 8, 8, 8], 16);
        let _ = bifpn.forward(&raw, Mode::Eval);
    }
}
