//! Network configuration and validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    EfficientnetStyle,
    ConvnextStyle,
}

/// Everything that determines one experiment's network, including the
/// ablation-facing switches (`use_esc`, `use_bilinear_upsample`, `backbone`)
/// and the architecture knobs they act on.
///
/// Two configs with equal fields and equal `seed` build parameter-wise
/// identical models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub use_esc: bool,
    pub use_bilinear_upsample: bool,
    pub patch_size: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    pub bifpn_channels: usize,
    pub bifpn_levels: usize,
    #[serde(default = "default_bifpn_repeats")]
    pub bifpn_repeats: usize,
    /// Backbone feature widths per pyramid level; empty means the built-in
    /// defaults for `bifpn_levels`.
    #[serde(default)]
    pub stage_widths: Vec<usize>,
    /// Stride-1 refinement blocks per backbone stage.
    #[serde(default = "default_backbone_depth")]
    pub backbone_depth: usize,
    #[serde(default = "default_esc_kernel")]
    pub esc_kernel: usize,
    #[serde(default = "default_esc_dilation")]
    pub esc_dilation: usize,
    pub seed: u64,
    /// Optional checkpoint whose `backbone.*` arrays are loaded after
    /// construction in place of the random initialization.
    #[serde(default)]
    pub backbone_weights: Option<PathBuf>,
}

fn default_num_classes() -> usize {
    2
}
fn default_bifpn_repeats() -> usize {
    3
}
fn default_backbone_depth() -> usize {
    1
}
fn default_esc_kernel() -> usize {
    7
}
fn default_esc_dilation() -> usize {
    2
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::EfficientnetStyle,
            use_esc: true,
            use_bilinear_upsample: true,
            patch_size: 128,
            num_classes: default_num_classes(),
            bifpn_channels: 64,
            bifpn_levels: 5,
            bifpn_repeats: default_bifpn_repeats(),
            stage_widths: Vec::new(),
            backbone_depth: default_backbone_depth(),
            esc_kernel: default_esc_kernel(),
            esc_dilation: default_esc_dilation(),
            seed: 0,
            backbone_weights: None,
        }
    }
}

impl ModelConfig {
    /// A tiny configuration for tests and examples: 3 pyramid levels, narrow
    /// widths, one BiFPN repeat.
    pub fn micro(seed: u64) -> Self {
        ModelConfig {
            patch_size: 64,
            bifpn_channels: 16,
            bifpn_levels: 3,
            bifpn_repeats: 1,
            stage_widths: vec![8, 12, 16],
            seed,
            ..ModelConfig::default()
        }
    }

    /// Smallest sensible configuration: one pyramid level, 8 channels.
    pub fn nano(seed: u64) -> Self {
        ModelConfig {
            patch_size: 16,
            bifpn_channels: 8,
            bifpn_levels: 1,
            bifpn_repeats: 1,
            stage_widths: vec![8],
            seed,
            ..ModelConfig::default()
        }
    }

    /// The spatial size of every feature map must stay integral down to the
    /// deepest pyramid level, one halving below which the backbone stem
    /// also works; hence patch sizes must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        1 << (self.bifpn_levels + 1)
    }

    /// Backbone widths per level, falling back to built-in defaults.
    pub fn resolved_stage_widths(&self) -> Vec<usize> {
        if !self.stage_widths.is_empty() {
            return self.stage_widths.clone();
        }
        const DEFAULTS: [usize; 5] = [24, 40, 112, 192, 320];
        DEFAULTS[..self.bifpn_levels].to_vec()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(1..=5).contains(&self.bifpn_levels) {
            return Err(ModelError::InvalidConfig(format!(
                "bifpn_levels must be in 1..=5, got {}",
                self.bifpn_levels
            )));
        }
        let mult = self.required_multiple();
        if self.patch_size == 0 || self.patch_size % mult != 0 {
            return Err(ModelError::InvalidPatchSize {
                patch_size: self.patch_size,
                required_multiple: mult,
            });
        }
        if self.num_classes < 1 {
            return Err(ModelError::InvalidConfig("num_classes must be >= 1".into()));
        }
        if self.bifpn_channels < 8 {
            return Err(ModelError::InvalidConfig(format!(
                "bifpn_channels must be >= 8, got {}",
                self.bifpn_channels
            )));
        }
        if self.bifpn_repeats < 1 {
            return Err(ModelError::InvalidConfig("bifpn_repeats must be >= 1".into()));
        }
        let widths = self.resolved_stage_widths();
        if widths.len() != self.bifpn_levels {
            return Err(ModelError::InvalidConfig(format!(
                "stage_widths has {} entries but bifpn_levels is {}",
                widths.len(),
                self.bifpn_levels
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(ModelError::InvalidConfig("stage_widths entries must be positive".into()));
        }
        if self.esc_kernel < 3 || self.esc_kernel % 2 == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "esc_kernel must be odd and >= 3, got {}",
                self.esc_kernel
            )));
        }
        if self.esc_dilation < 1 {
            return Err(ModelError::InvalidConfig("esc_dilation must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::micro(1).validate().is_ok());
        assert!(ModelConfig::nano(1).validate().is_ok());
    }

    #[test]
    fn patch_size_must_be_multiple_of_power_of_two() {
        // 5 levels need multiples of 64; 250 is not one.
        let cfg = ModelConfig { patch_size: 250, ..ModelConfig::default() };
        match cfg.validate() {
            Err(ModelError::InvalidPatchSize { required_multiple, .. }) => {
                assert_eq!(required_multiple, 64)
            }
            other => panic!("expected InvalidPatchSize, got {other:?}"),
        }
    }

    #[test]
    fn unknown_backbone_is_rejected_at_parse_time() {
        let json = r#"{
            "backbone": "resnet_style",
            "use_esc": true,
            "use_bilinear_upsample": true,
            "patch_size": 128,
            "bifpn_channels": 64,
            "bifpn_levels": 5,
            "seed": 0
        }"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    }

    #[test]
    fn config_json_roundtrip() {
        let cfg = ModelConfig::micro(42);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn small_channel_count_rejected() {
        let cfg = ModelConfig { bifpn_channels: 4, ..ModelConfig::micro(0) };
        assert!(cfg.validate().is_err());
    }
}
