//! Short train / save / reload / predict / evaluate round trip on phantom
//! volumes, reporting per-volume and aggregate 3D Dice.
//!
//! ```text
//! cargo run --example predict_and_evaluate
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smedseg::data::make_phantom_dataset;
use smedseg::metrics::{dice, error_rates, volume_predict, BinaryMask3D, DiceReport};
use smedseg::model::{build_model, Model, ModelConfig};
use smedseg::nn::OptimizerKind;
use smedseg::train::{train, Dataset, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = std::env::temp_dir().join("smedseg_predict_eval");
    std::fs::create_dir_all(&out_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let volumes = make_phantom_dataset(4, (10, 64, 64), &mut rng)?;
    let val = Dataset::new(volumes[3..].to_vec());
    let train_data = Dataset::new(volumes[..3].to_vec());

    let mut model = build_model(&ModelConfig::micro(1))?;
    let cfg = TrainConfig {
        batch_size: 10,
        patch_size: 64,
        optimizer: OptimizerKind::AdamW,
        initial_lr: 3e-3,
        weight_decay: 1e-5,
        max_epochs: 10,
        seed: 2,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &train_data, &val, &cfg, &out_dir)?;
    println!(
        "trained {} steps; best val loss {:.4} at epoch {}",
        report.optimization_steps, report.best_val_loss, report.best_epoch
    );

    // Reload the best checkpoint, as an inference deployment would.
    let model = Model::load(&report.checkpoint)?;
    let mut scores = Vec::new();
    for (ct, labels) in val.volumes.iter().chain(train_data.volumes.iter()) {
        let pred = volume_predict(&model, ct)?;
        let pred_lung = BinaryMask3D::lung_from(&pred, ct.spacing);
        let gt_lung = BinaryMask3D::lung_from(labels, ct.spacing);
        let d = dice(&pred_lung, &gt_lung)?;
        let (fp, fnr) = error_rates(&pred_lung, &gt_lung)?;
        println!(
            "{}: lung dice {d:.4} (fp rate {fp:.4}, fn rate {fnr:.4})",
            ct.subject_id
        );
        scores.push((ct.subject_id.clone(), d));
    }
    let summary = DiceReport::from_scores(scores);
    println!("aggregate: {:.4} ± {:.4} over {} volumes", summary.mean, summary.std, summary.per_volume.len());
    Ok(())
}
