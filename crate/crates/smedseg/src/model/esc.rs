//! Exponential stride compression.
//!
//! Every pyramid level is compressed by a large dilated depthwise separable
//! convolution whose stride grows exponentially with the level index
//! (`2^(k+1)` at level `k`). The compressed maps are globally average
//! pooled, summed across levels, and passed through a linear layer and
//! sigmoid to produce a per-channel gate in (0, 1) that reweights the
//! highest-resolution features before the segmentation head.

use rand_chacha::ChaCha8Rng;

use crate::nn::layers::{DwSepConv, Linear, Visitor};
use crate::nn::ops;
use crate::nn::Var;

pub struct EscModule {
    compressors: Vec<DwSepConv>,
    embed: Linear,
}

impl EscModule {
    pub fn new(
        rng: &mut ChaCha8Rng,
        levels: usize,
        channels: usize,
        kernel: usize,
        dilation: usize,
    ) -> Self {
        let compressors = (0..levels)
            .map(|k| DwSepConv::new(rng, channels, channels, kernel, 1 << (k + 1), dilation))
            .collect();
        EscModule {
            compressors,
            embed: Linear::new(rng, channels, channels),
        }
    }

    /// Gate vector `[N, C]`, every entry strictly inside (0, 1). The sigmoid
    /// output is clamped one ulp-scale away from the interval ends so the
    /// open-interval property survives f64 rounding on saturated logits.
    pub fn gate(&self, pyramid: &[Var]) -> Var {
        assert_eq!(pyramid.len(), self.compressors.len(), "level count mismatch");
        let mut summed: Option<Var> = None;
        for (level, comp) in pyramid.iter().zip(&self.compressors) {
            let pooled = ops::global_avg_pool(&comp.forward(level));
            summed = Some(match summed {
                Some(acc) => ops::add(&acc, &pooled),
                None => pooled,
            });
        }
        let logits = self.embed.forward(&summed.expect("at least one level"));
        ops::clamp(&ops::sigmoid(&logits), 1e-12, 1.0 - 1e-12)
    }

    /// Actual stride configured in each level's compression convolution.
    pub fn compression_strides(&self) -> Vec<usize> {
        self.compressors.iter().map(|c| c.stride()).collect()
    }

    pub fn visit<'b>(&'b self, prefix: &str, v: Visitor<'_, 'b>) {
        for (k, comp) in self.compressors.iter().enumerate() {
            comp.visit(&format!("{prefix}.compress.{k}"), v);
        }
        self.embed.visit(&format!("{prefix}.embed"), v);
    }
}
