//! The segmentation network: backbone adapter, BiFPN, exponential stride
//! compression, segmentation head.
//!
//! The forward pass takes a 2.5D patch (three neighboring axial slices as
//! channels, raw Hounsfield units) and produces independent per-class
//! sigmoid probability maps at input resolution. The ESC gate is always
//! constructed so parameter layouts do not depend on the `use_esc` switch;
//! when disabled it simply never enters the graph and receives no
//! gradients.
//!
//! A model instance is single-writer during training (batch-norm statistics
//! and parameters mutate); concurrent inference needs replica instances.

mod backbone;
mod bifpn;
pub mod checkpoint;
mod config;
mod esc;
mod head;

use std::cell::RefCell;
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::layers::{Mode, NamedTensor};
use crate::nn::{ops, NoGradGuard, Tensor, Var};

pub use config::{BackboneKind, ModelConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("patch size {patch_size} is not a positive multiple of {required_multiple}")]
    InvalidPatchSize { patch_size: usize, required_multiple: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} incompatible with expected {expected}")]
    ShapeMismatch { expected: String, got: Vec<usize> },
    #[error("input contains non-finite intensities")]
    NonFiniteInput,
    #[error("feature pyramid has {got} levels, model expects {expected}")]
    LevelCountMismatch { expected: usize, got: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A 2.5D network input: exactly three neighboring axial slices, finite
/// Hounsfield-unit intensities, square spatial extent.
#[derive(Clone, Debug)]
pub struct InputPatch {
    data: Tensor,
}

impl InputPatch {
    pub fn new(data: Tensor) -> Result<Self, ModelError> {
        let shape = data.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(ModelError::ShapeMismatch {
                expected: "(3, size, size)".into(),
                got: shape,
            });
        }
        if shape[1] != shape[2] {
            return Err(ModelError::ShapeMismatch {
                expected: "square spatial extent".into(),
                got: shape,
            });
        }
        if !data.is_finite() {
            return Err(ModelError::NonFiniteInput);
        }
        Ok(InputPatch { data })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn size(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Multi-resolution features after BiFPN fusion: level k has spatial size
/// `patch / 2^(k+2)` and a uniform channel count.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    /// Checks the structural invariants: uniform channel count, spatial
    /// sizes strictly halving per level.
    pub fn validate(&self, channels: usize) -> Result<(), ModelError> {
        for (k, level) in self.levels.iter().enumerate() {
            let s = level.shape();
            if s.len() != 3 || s[0] != channels {
                return Err(ModelError::ShapeMismatch {
                    expected: format!("({channels}, h, w) at level {k}"),
                    got: s.to_vec(),
                });
            }
            if k > 0 {
                let prev = self.levels[k - 1].shape();
                if prev[1] != 2 * s[1] || prev[2] != 2 * s[2] {
                    return Err(ModelError::ShapeMismatch {
                        expected: format!("level {k} to halve level {}", k - 1),
                        got: s.to_vec(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Channel gate emitted by the ESC branch; every entry lies strictly inside
/// (0, 1) because it is a sigmoid output.
#[derive(Clone, Debug)]
pub struct EscEmbedding {
    pub gate: Vec<f64>,
}

impl EscEmbedding {
    fn new(gate: Vec<f64>) -> Result<Self, ModelError> {
        if gate.iter().any(|&g| !(g > 0.0 && g < 1.0)) {
            return Err(ModelError::InvalidConfig(
                "ESC gate escaped the open interval (0,1)".into(),
            ));
        }
        Ok(EscEmbedding { gate })
    }
}

/// Per-class probability maps `(num_classes, size, size)`. Classes are
/// independent sigmoid activations (multitask heads), not a softmax
/// simplex; for the default two classes, channel 0 is lung and channel 1 is
/// findings.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub probabilities: Tensor,
}

impl Prediction {
    pub fn num_classes(&self) -> usize {
        self.probabilities.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.probabilities.shape()[1]
    }
}

pub struct Model {
    config: ModelConfig,
    backbone: backbone::Backbone,
    bifpn: bifpn::BiFpn,
    esc: esc::EscModule,
    head: head::SegHead,
}

/// Builds a parameterized network from a validated config. Initialization
/// is a pure function of `config.seed`; when `config.backbone_weights`
/// names a checkpoint, its `backbone.*` arrays replace the random backbone
/// initialization.
pub fn build_model(config: &ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let widths = config.resolved_stage_widths();
    let backbone = backbone::Backbone::new(&mut rng, config);
    let bifpn = bifpn::BiFpn::new(&mut rng, &widths, config.bifpn_channels, config.bifpn_repeats);
    let esc = esc::EscModule::new(
        &mut rng,
        config.bifpn_levels,
        config.bifpn_channels,
        config.esc_kernel,
        config.esc_dilation,
    );
    let head = head::SegHead::new(
        &mut rng,
        config.bifpn_channels,
        config.num_classes,
        config.use_bilinear_upsample,
    );
    let model = Model { config: config.clone(), backbone, bifpn, esc, head };
    if let Some(path) = &config.backbone_weights {
        checkpoint::load_named_into(&model, path, Some("backbone."))?;
    }
    Ok(model)
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Validates a batched input `[N, 3, H, W]`: finite values, three
    /// channels, spatial sizes compatible with the pyramid depth.
    fn validate_batch(&self, x: &Tensor) -> Result<(), ModelError> {
        let s = x.shape().to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(ModelError::ShapeMismatch {
                expected: "(n, 3, h, w)".into(),
                got: s,
            });
        }
        let mult = self.config.required_multiple();
        if s[2] == 0 || s[3] == 0 || s[2] % mult != 0 || s[3] % mult != 0 {
            return Err(ModelError::ShapeMismatch {
                expected: format!("spatial sizes divisible by {mult}"),
                got: s,
            });
        }
        if !x.is_finite() {
            return Err(ModelError::NonFiniteInput);
        }
        Ok(())
    }

    /// Raw backbone features for a batch, one per pyramid level.
    fn backbone_vars(&self, x: &Var, mode: Mode) -> Vec<Var> {
        self.backbone.forward(x, mode)
    }

    /// Fused pyramid for a batch.
    fn pyramid_vars(&self, raw: &[Var], mode: Mode) -> Result<Vec<Var>, ModelError> {
        if raw.len() != self.bifpn.levels() {
            return Err(ModelError::LevelCountMismatch {
                expected: self.bifpn.levels(),
                got: raw.len(),
            });
        }
        Ok(self.bifpn.forward(raw, mode))
    }

    /// Full differentiable forward pass over a batch `[N, 3, H, W]`,
    /// returning per-class probabilities `[N, classes, H, W]`.
    pub fn forward_batch(&self, input: &Tensor, mode: Mode) -> Result<Var, ModelError> {
        self.validate_batch(input)?;
        let x = Var::constant(input.clone());
        let raw = self.backbone_vars(&x, mode);
        let pyramid = self.pyramid_vars(&raw, mode)?;
        let mut finest = pyramid[0].clone();
        if self.config.use_esc {
            let gate = self.esc.gate(&pyramid);
            finest = ops::mul_channel_gate(&finest, &gate);
        }
        Ok(self.head.forward(&finest, mode))
    }

    /// Inference on a single patch.
    pub fn predict(&self, patch: &InputPatch) -> Result<Prediction, ModelError> {
        let _guard = NoGradGuard::new();
        let (h, w) = (patch.data().shape()[1], patch.data().shape()[2]);
        let batch = patch.data().clone().reshaped(&[1, 3, h, w]);
        let out = self.forward_batch(&batch, Mode::Eval)?;
        let value = out.value().clone();
        let classes = value.shape()[1];
        Ok(Prediction {
            probabilities: value.reshaped(&[classes, h, w]),
        })
    }

    /// Raw multi-scale backbone features for one patch (inference mode).
    pub fn backbone_features(&self, patch: &InputPatch) -> Result<Vec<Tensor>, ModelError> {
        let _guard = NoGradGuard::new();
        let (h, w) = (patch.data().shape()[1], patch.data().shape()[2]);
        let batch = patch.data().clone().reshaped(&[1, 3, h, w]);
        self.validate_batch(&batch)?;
        let x = Var::constant(batch);
        Ok(self
            .backbone_vars(&x, Mode::Eval)
            .into_iter()
            .map(|f| {
                let v = f.value().clone();
                let s = v.shape().to_vec();
                v.reshaped(&s[1..])
            })
            .collect())
    }

    /// Fused feature pyramid for one patch (inference mode).
    pub fn feature_pyramid(&self, patch: &InputPatch) -> Result<FeaturePyramid, ModelError> {
        let _guard = NoGradGuard::new();
        let (h, w) = (patch.data().shape()[1], patch.data().shape()[2]);
        let batch = patch.data().clone().reshaped(&[1, 3, h, w]);
        self.validate_batch(&batch)?;
        let x = Var::constant(batch);
        let raw = self.backbone_vars(&x, Mode::Eval);
        let pyramid = self.pyramid_vars(&raw, Mode::Eval)?;
        Ok(FeaturePyramid {
            levels: pyramid
                .into_iter()
                .map(|f| {
                    let v = f.value().clone();
                    let s = v.shape().to_vec();
                    v.reshaped(&s[1..])
                })
                .collect(),
        })
    }

    /// ESC gate for one patch (inference mode). Available regardless of
    /// `use_esc`; the flag only controls whether the gate participates in
    /// the forward pass.
    pub fn esc_embedding(&self, patch: &InputPatch) -> Result<EscEmbedding, ModelError> {
        let _guard = NoGradGuard::new();
        let (h, w) = (patch.data().shape()[1], patch.data().shape()[2]);
        let batch = patch.data().clone().reshaped(&[1, 3, h, w]);
        self.validate_batch(&batch)?;
        let x = Var::constant(batch);
        let raw = self.backbone_vars(&x, Mode::Eval);
        let pyramid = self.pyramid_vars(&raw, Mode::Eval)?;
        let gate = self.esc.gate(&pyramid);
        let data = gate.value().data().to_vec();
        EscEmbedding::new(data)
    }

    /// Configured stride of each ESC compression convolution.
    pub fn esc_compression_strides(&self) -> Vec<usize> {
        self.esc.compression_strides()
    }

    /// Normalized BiFPN fusion weights per node (for inspection/tests).
    pub fn fusion_weight_sets(&self) -> Vec<Vec<f64>> {
        self.bifpn.fusion_weight_sets()
    }

    /// Walks every parameter and buffer under hierarchical names.
    pub fn visit<'b>(&'b self, v: &mut dyn FnMut(String, NamedTensor<'b>)) {
        self.backbone.visit("backbone", v);
        self.bifpn.visit("bifpn", v);
        self.esc.visit("esc", v);
        self.head.visit("head", v);
    }

    pub fn named_parameters(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| {
            if let NamedTensor::Param(p) = t {
                out.push((name, p.clone()));
            }
        });
        out
    }

    pub fn parameters(&self) -> Vec<Var> {
        self.named_parameters().into_iter().map(|(_, p)| p).collect()
    }

    pub fn named_buffers(&self) -> Vec<(String, Rc<RefCell<Tensor>>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| {
            if let NamedTensor::Buffer(b) = t {
                out.push((name, b.clone()));
            }
        });
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.value().numel()).sum()
    }

    /// Names of all ESC parameters (used to verify ablation isolation).
    pub fn esc_parameter_names(&self) -> Vec<String> {
        self.named_parameters()
            .into_iter()
            .filter(|(n, _)| n.starts_with("esc."))
            .map(|(n, _)| n)
            .collect()
    }

    pub fn zero_grad(&self) {
        for p in self.parameters() {
            p.zero_grad();
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &Path) -> Result<Model, ModelError> {
        checkpoint::load(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_patch(size: usize, fill: f64) -> InputPatch {
        InputPatch::new(Tensor::full(&[3, size, size], fill)).unwrap()
    }

    #[test]
    fn build_rejects_bad_patch_size() {
        let cfg = ModelConfig { patch_size: 250, ..ModelConfig::default() };
        assert!(matches!(
            build_model(&cfg),
            Err(ModelError::InvalidPatchSize { .. })
        ));
    }

    #[test]
    fn forward_shape_contract_micro() {
        let model = build_model(&ModelConfig::micro(3)).unwrap();
        let pred = model.predict(&finite_patch(64, -500.0)).unwrap();
        assert_eq!(pred.probabilities.shape(), &[2, 64, 64]);
        assert!(pred.probabilities.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn backbone_feature_ladder_matches_strides() {
        let model = build_model(&ModelConfig::micro(0)).unwrap();
        let feats = model.backbone_features(&finite_patch(64, 0.0)).unwrap();
        let sizes: Vec<usize> = feats.iter().map(|f| f.shape()[1]).collect();
        assert_eq!(sizes, vec![16, 8, 4]);
    }

    #[test]
    fn pyramid_validates_micro() {
        let model = build_model(&ModelConfig::micro(0)).unwrap();
        let pyr = model.feature_pyramid(&finite_patch(64, -200.0)).unwrap();
        pyr.validate(16).unwrap();
    }

    #[test]
    fn nan_input_is_rejected() {
        let mut t = Tensor::zeros(&[3, 64, 64]);
        t.data_mut()[10] = f64::NAN;
        assert!(matches!(InputPatch::new(t), Err(ModelError::NonFiniteInput)));
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let t = Tensor::zeros(&[2, 64, 64]);
        assert!(matches!(
            InputPatch::new(t),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn indivisible_input_size_is_rejected() {
        // 40 is not a multiple of 16 (3 levels -> 2^4).
        let model = build_model(&ModelConfig::micro(0)).unwrap();
        let patch = InputPatch::new(Tensor::zeros(&[3, 40, 40])).unwrap();
        assert!(matches!(
            model.predict(&patch),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a = build_model(&ModelConfig::micro(42)).unwrap();
        let b = build_model(&ModelConfig::micro(42)).unwrap();
        let pa = a.named_parameters();
        let pb = b.named_parameters();
        assert_eq!(pa.len(), pb.len());
        for ((na, va), (nb, vb)) in pa.iter().zip(pb.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va.value().data(), vb.value().data(), "parameter {na} differs");
        }
    }

    #[test]
    fn different_seeds_build_different_parameters() {
        let a = build_model(&ModelConfig::micro(1)).unwrap();
        let b = build_model(&ModelConfig::micro(2)).unwrap();
        let wa = &a.named_parameters()[0].1;
        let wb = &b.named_parameters()[0].1;
        assert_ne!(wa.value().data(), wb.value().data());
    }

    #[test]
    fn esc_gate_length_equals_channels() {
        let model = build_model(&ModelConfig::micro(5)).unwrap();
        let emb = model.esc_embedding(&finite_patch(64, -800.0)).unwrap();
        assert_eq!(emb.gate.len(), 16);
        assert!(emb.gate.iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn esc_parameters_exist_even_when_disabled() {
        let cfg = ModelConfig { use_esc: false, ..ModelConfig::micro(0) };
        let model = build_model(&cfg).unwrap();
        assert!(!model.esc_parameter_names().is_empty());
    }

    #[test]
    fn deterministic_inference() {
        let model = build_model(&ModelConfig::micro(9)).unwrap();
        let p = finite_patch(64, -123.0);
        let a = model.predict(&p).unwrap();
        let b = model.predict(&p).unwrap();
        assert_eq!(a.probabilities.data(), b.probabilities.data());
    }
}
