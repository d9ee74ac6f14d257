//! Backbone adapters producing multi-scale features at strides 4, 8, 16,
//! 32 (and 64 when a fifth level is configured).
//!
//! Two small families are provided. The EfficientNet-style one is a stack of
//! depthwise separable blocks with batch norm and swish; the ConvNext-style
//! one uses a patchify stem, 7x7 depthwise kernels, channel layer norm and
//! GELU with inverted-bottleneck blocks. Both accept externally supplied
//! weights through the checkpoint loader.

use rand_chacha::ChaCha8Rng;

use crate::nn::layers::{
    BatchNorm2d, Conv2d, DwSepConv, LayerNormChannels, Mode, Visitor,
};
use crate::nn::ops::{self, ConvSpec};
use crate::nn::Var;

use super::config::{BackboneKind, ModelConfig};

pub enum Backbone {
    Efficient(EfficientBackbone),
    ConvNext(ConvNextBackbone),
}

impl Backbone {
    pub fn new(rng: &mut ChaCha8Rng, config: &ModelConfig) -> Self {
        let widths = config.resolved_stage_widths();
        match config.backbone {
            BackboneKind::EfficientnetStyle => {
                Backbone::Efficient(EfficientBackbone::new(rng, &widths, config.backbone_depth))
            }
            BackboneKind::ConvnextStyle => {
                Backbone::ConvNext(ConvNextBackbone::new(rng, &widths, config.backbone_depth))
            }
        }
    }

    /// One feature map per stage, strides `4 * 2^k`.
    pub fn forward(&self, x: &Var, mode: Mode) -> Vec<Var> {
        match self {
            Backbone::Efficient(b) => b.forward(x, mode),
            Backbone::ConvNext(b) => b.forward(x),
        }
    }

    pub fn visit<'b>(&'b self, prefix: &str, v: Visitor<'_, 'b>) {
        match self {
            Backbone::Efficient(b) => b.visit(prefix, v),
            Backbone::ConvNext(b) => b.visit(prefix, v),
        }
    }
}

struct EffBlock {
    conv: DwSepConv,
    bn: BatchNorm2d,
}

impl EffBlock {
    fn new(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        EffBlock {
            conv: DwSepConv::new(rng, in_ch, out_ch, 3, stride, 1),
            bn: BatchNorm2d::new(out_ch),
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

struct EffStage {
    down: EffBlock,
    refine: Vec<EffBlock>,
}

pub struct EfficientBackbone {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<EffStage>,
}

impl EfficientBackbone {
    fn new(rng: &mut ChaCha8Rng, widths: &[usize], depth: usize) -> Self {
        let stem = Conv2d::new(
            rng,
            3,
            widths[0],
            3,
            ConvSpec { stride: 2, padding: 1, dilation: 1, groups: 1 },
            false,
        );
        let stem_bn = BatchNorm2d::new(widths[0]);
        let mut stages = Vec::new();
        let mut in_ch = widths[0];
        for &w in widths {
            let down = EffBlock::new(rng, in_ch, w, 2);
            let refine = (0..depth).map(|_| EffBlock::new(rng, w, w, 1)).collect();
            stages.push(EffStage { down, refine });
            in_ch = w;
        }
        EfficientBackbone { stem, stem_bn, stages }
    }

    fn forward(&self, x: &Var, mode: Mode) -> Vec<Var> {
        let mut cur = ops::swish(&self.stem_bn.forward(&self.stem.forward(x), mode));
        let mut features = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            cur = stage.down.forward(&cur, mode);
            for block in &stage.refine {
                cur = ops::add(&block.forward(&cur, mode), &cur);
            }
            features.push(cur.clone());
        }
        features
    }

    fn visit<'b>(&'b self, prefix: &str, v: Visitor<'_, 'b>) {
        self.stem.visit(&format!("{prefix}.stem.conv"), v);
        self.stem_bn.visit(&format!("{prefix}.stem.bn"), v);
        for (i, stage) in self.stages.iter().enumerate() {
            stage.down.visit(&format!("{prefix}.stages.{i}.down"), v);
            for (j, block) in stage.refine.iter().enumerate() {
                block.visit(&format!("{prefix}.stages.{i}.refine.{j}"), v);
            }
        }
    }
}

struct CnBlock {
    dw: Conv2d,
    norm: LayerNormChannels,
    expand: Conv2d,
    project: Conv2d,
}

impl CnBlock {
    fn new(rng: &mut ChaCha8Rng, ch: usize) -> Self {
        CnBlock {
            dw: Conv2d::new(
                rng,
                ch,
                ch,
                7,
                ConvSpec { stride: 1, padding: 3, dilation: 1, groups: ch },
                true,
            ),
            norm: LayerNormChannels::new(ch),
            expand: Conv2d::new(rng, ch, 4 * ch, 1, ConvSpec::default(), true),
            project: Conv2d::new(rng, 4 * ch, ch, 1, ConvSpec::default(), true),
        }
    }

    fn forward(&self, x: &Var) -> Var {
        let h = self.norm.forward(&self.dw.forward(x));
        let h = self.project.forward(&ops::gelu(&self.expand.forward(&h)));
        ops::add(&h, x)
    }

    fn visit<'b>(&'b self, prefix: &str, v: Visitor<'_, 'b>) {
        self.dw.visit(&format!("{prefix}.dw"), v);
        self.norm.visit(&format!("{prefix}.norm"), v);
        self.expand.visit(&format!("{prefix}.expand"), v);
        self.project.visit(&format!("{prefix}.project"), v);
    }
}

struct CnStage {
    /// Norm + strided conv; absent for stage 0 where the stem already
    /// reaches stride 4.
    down: Option<(LayerNormChannels, Conv2d)>,
    blocks: Vec<CnBlock>,
}

pub struct ConvNextBackbone {
    stem: Conv2d,
    stem_norm: LayerNormChannels,
    stages: Vec<CnStage>,
}

impl ConvNextBackbone {
    fn new(rng: &mut ChaCha8Rng, widths: &[usize], depth: usize) -> Self {
        let stem = Conv2d::new(
            rng,
            3,
            widths[0],
            4,
            ConvSpec { stride: 4, padding: 0, dilation: 1, groups: 1 },
            true,
        );
        let stem_norm = LayerNormChannels::new(widths[0]);
        let mut stages = Vec::new();
        let mut in_ch = widths[0];
        for (k, &w) in widths.iter().enumerate() {
            let down = (k > 0).then(|| {
                (
                    LayerNormChannels::new(in_ch),
                    Conv2d::new(
                        rng,
                        in_ch,
                        w,
                        2,
                        ConvSpec { stride: 2, padding: 0, dilation: 1, groups: 1 },
                        true,
                    ),
                )
            });
            let blocks = (0..depth.max(1)).map(|_| CnBlock::new(rng, w)).collect();
            stages.push(CnStage { down, blocks });
            in_ch = w;
        }
        ConvNextBackbone { stem, stem_norm, stages }
    }

    fn forward(&self, x: &Var) -> Vec<Var> {
        let mut cur = self.stem_norm.forward(&self.stem.forward(x));
        let mut features = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            if let Some((norm, conv)) = &stage.down {
                cur = conv.forward(&norm.forward(&cur));
            }
            for block in &stage.blocks {
                cur = block.forward(&cur);
            }
            features.push(cur.clone());
        }
        features
    }

    fn visit<'b>(&'b self, prefix: &str, v: Visitor<'_, 'b>) {
        self.stem.visit(&format!("{prefix}.stem.conv"), v);
        self.stem_norm.visit(&format!("{prefix}.stem.norm"), v);
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some((norm, conv)) = &stage.down {
                norm.visit(&format!("{prefix}.stages.{i}.down.norm"), v);
                conv.visit(&format!("{prefix}.stages.{i}.down.conv"), v);
            }
            for (j, block) in stage.blocks.iter().enumerate() {
                block.visit(&format!("{prefix}.stages.{i}.blocks.{j}"), v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use rand::SeedableRng;

    fn feature_sizes(kind: BackboneKind, input: usize, levels: usize) -> Vec<usize> {
        let cfg = ModelConfig {
            backbone: kind,
            bifpn_levels: levels,
            stage_widths: vec![8; levels],
            patch_size: input,
            bifpn_channels: 8,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&mut rng, &cfg);
        let x = Var::constant(Tensor::zeros(&[1, 3, input, input]));
        bb.forward(&x, Mode::Eval)
            .iter()
            .map(|f| f.shape()[2])
            .collect()
    }

    #[test]
    fn efficient_features_follow_stride_ladder() {
        // 256 input over strides [4, 8, 16, 32, 64] -> [64, 32, 16, 8, 4]
        assert_eq!(
            feature_sizes(BackboneKind::EfficientnetStyle, 256, 5),
            vec![64, 32, 16, 8, 4]
        );
        // 128 input, 4 levels -> [32, 16, 8, 4]
        assert_eq!(
            feature_sizes(BackboneKind::EfficientnetStyle, 128, 4),
            vec![32, 16, 8, 4]
        );
    }

    #[test]
    fn convnext_features_follow_stride_ladder() {
        assert_eq!(
            feature_sizes(BackboneKind::ConvnextStyle, 128, 4),
            vec![32, 16, 8, 4]
        );
    }

    #[test]
    fn channel_widths_match_config() {
        let cfg = ModelConfig {
            stage_widths: vec![8, 12, 16],
            bifpn_levels: 3,
            patch_size: 64,
            bifpn_channels: 8,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&mut rng, &cfg);
        let x = Var::constant(Tensor::zeros(&[1, 3, 64, 64]));
        let chans: Vec<usize> = bb
            .forward(&x, Mode::Eval)
            .iter()
            .map(|f| f.shape()[1])
            .collect();
        assert_eq!(chans, vec![8, 12, 16]);
    }
}
