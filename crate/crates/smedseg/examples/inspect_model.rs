//! Architecture tour: builds a network and prints the shapes flowing
//! through it — backbone feature ladder, fused pyramid, ESC compression
//! strides and gate statistics, output probabilities.
//!
//! ```text
//! cargo run --example inspect_model
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smedseg::model::{build_model, InputPatch, ModelConfig};
use smedseg::nn::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig {
        patch_size: 128,
        bifpn_levels: 4,
        bifpn_channels: 16,
        bifpn_repeats: 2,
        stage_widths: vec![8, 12, 16, 24],
        seed: 2024,
        ..ModelConfig::default()
    };
    let model = build_model(&cfg)?;
    println!("{} parameters", model.num_parameters());

    // A plausible 2.5D patch: raw Hounsfield units, no windowing.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = cfg.patch_size;
    let hu: Vec<f64> = (0..3 * p * p).map(|_| rng.random_range(-1000.0..400.0)).collect();
    let patch = InputPatch::new(Tensor::from_vec(&[3, p, p], hu))?;

    println!("\nbackbone features (stride ladder 4, 8, ...):");
    for (k, f) in model.backbone_features(&patch)?.iter().enumerate() {
        println!("  level {k}: {:?}", f.shape());
    }

    println!("\nfused pyramid (uniform {} channels):", cfg.bifpn_channels);
    let pyramid = model.feature_pyramid(&patch)?;
    for (k, f) in pyramid.levels.iter().enumerate() {
        println!("  level {k}: {:?}", f.shape());
    }
    pyramid.validate(cfg.bifpn_channels)?;

    println!("\nESC compression strides: {:?}", model.esc_compression_strides());
    let gate = model.esc_embedding(&patch)?.gate;
    let (min, max) = gate
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &g| (lo.min(g), hi.max(g)));
    println!("ESC gate: {} channels in ({min:.4}, {max:.4})", gate.len());

    println!("\nfusion weight sets (fresh model, normalized):");
    for (i, set) in model.fusion_weight_sets().iter().take(3).enumerate() {
        println!("  node {i}: {set:?}");
    }

    let pred = model.predict(&patch)?;
    println!(
        "\noutput: {:?} probabilities, range [{:.4}, {:.4}]",
        pred.probabilities.shape(),
        pred.probabilities.data().iter().cloned().fold(f64::INFINITY, f64::min),
        pred.probabilities.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    Ok(())
}
