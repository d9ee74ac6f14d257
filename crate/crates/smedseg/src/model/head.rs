//! Segmentation head: three depthwise-separable blocks (conv, batch norm,
//! swish) interleaved with two 2x upsampling steps that bring stride-4
//! features back to input resolution, then a 1x1 classifier with per-class
//! sigmoid.

use rand_chacha::ChaCha8Rng;

use crate::nn::layers::{BatchNorm2d, Conv2d, ConvTranspose2d, DwSepConv, Mode, Visitor};
use crate::nn::ops::{self, ConvSpec};
use crate::nn::Var;

enum Upsampler {
    Bilinear,
    Learned(ConvTranspose2d),
}

impl Upsampler {
    fn new(rng: &mut ChaCha8Rng, channels: usize, bilinear: bool) -> Self {
        if bilinear {
            Upsampler::Bilinear
        } else {
            Upsampler::Learned(ConvTranspose2d::new(rng, channels, channels, 2, 2))
        }
    }

    fn forward(&self, x: &Var) -> Var {
        match self {
            Upsampler::Bilinear => ops::bilinear_upsample2x(x),
            Upsampler::Learned(conv) => conv.forward(x),
        }
    }

    fn visit<'b>(&'b self, prefix: &str, v: Visitor<'_, 'b>) {
        if let Upsampler::Learned(conv) = self {
            conv.visit(prefix, v);
        }
    }
}

struct HeadBlock {
    conv: DwSepConv,
    bn: BatchNorm2d,
}

impl HeadBlock {
    fn new(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        HeadBlock {
            conv: DwSepConv::new(rng, channels, channels, 3, 1, 1),
            bn: BatchNorm2d::new(channels),
        }
    }

    fn forward(&self, x: &Var, mode: Mode) -> Var {
        ops::swish(&self.bn.forward(&self.conv.forward(x), mode))
    }

    fn visit<'b>(&'b self, prefix: &str, v: Visitor<'_, 'b>) {
        self.conv.visit(&format!("{prefix}.conv"), v);
        self.bn.visit(&format!("{prefix}.bn"), v);
    }
}

pub struct SegHead {
    blocks: [HeadBlock; 3],
    upsamplers: [Upsampler; 2],
    classifier: Conv2d,
}

impl SegHead {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, num_classes: usize, bilinear: bool) -> Self {
        SegHead {
            blocks: [
                HeadBlock::new(rng, channels),
                HeadBlock::new(rng, channels),
                HeadBlock::new(rng, channels),
            ],
            upsamplers: [
                Upsampler::new(rng, channels, bilinear),
                Upsampler::new(rng, channels, bilinear),
            ],
            classifier: Conv2d::new(rng, channels, num_classes, 1, ConvSpec::default(), true),
        }
    }

    /// Maps stride-4 features `[N, C, P/4, P/4]` to per-class probabilities
    /// `[N, classes, P, P]`.
    pub fn forward(&self, x: &Var, mode: Mode) -> Var {
        let h = self.blocks[0].forward(x, mode);
        let h = self.upsamplers[0].forward(&h);
        let h = self.blocks[1].forward(&h, mode);
        let h = self.upsamplers[1].forward(&h);
        let h = self.blocks[2].forward(&h, mode);
        ops::sigmoid(&self.classifier.forward(&h))
    }

    pub fn visit<'b>(&'b self, prefix: &str, v: Visitor<'_, 'b>) {
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("{prefix}.blocks.{i}"), v);
        }
        for (i, up) in self.upsamplers.iter().enumerate() {
            up.visit(&format!("{prefix}.upsample.{i}"), v);
        }
        self.classifier.visit(&format!("{prefix}.classifier"), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use rand::SeedableRng;

    #[test]
    fn head_restores_input_resolution() {
        for bilinear in [true, false] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let head = SegHead::new(&mut rng, 8, 2, bilinear);
            let x = Var::constant(Tensor::full(&[1, 8, 16, 16], 0.3));
            let y = head.forward(&x, Mode::Eval);
            assert_eq!(y.shape(), vec![1, 2, 64, 64]);
            for &p in y.value().data() {
                assert!((0.0..=1.0).contains(&p));
            }
        }
    }

    #[test]
    fn learned_upsampler_registers_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = SegHead::new(&mut rng, 8, 2, false);
        let mut names = Vec::new();
        head.visit("head", &mut |n, _| names.push(n));
        assert!(names.iter().any(|n| n.starts_with("head.upsample.0")));

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = SegHead::new(&mut rng, 8, 2, true);
        let mut names = Vec::new();
        head.visit("head", &mut |n, _| names.push(n));
        assert!(!names.iter().any(|n| n.starts_with("head.upsample")));
    }
}
