//! Trains a micro model on synthetic phantoms and reports training-set 3D
//! Dice through full-volume prediction.
//!
//! ```text
//! cargo run --example train_phantom
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smedseg::data::make_phantom_dataset;
use smedseg::metrics::{dice, volume_predict, BinaryMask3D};
use smedseg::model::{build_model, Model, ModelConfig};
use smedseg::nn::OptimizerKind;
use smedseg::train::{train, Dataset, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = std::env::temp_dir().join("smedseg_train_phantom");
    std::fs::create_dir_all(&out_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let volumes = make_phantom_dataset(8, (16, 64, 64), &mut rng)?;
    let val = Dataset::new(volumes[..2].to_vec());
    let train_data = Dataset::new(volumes);

    let model_cfg = ModelConfig::micro(7);
    let mut model = build_model(&model_cfg)?;
    println!("model: {} parameters", model.num_parameters());

    let cfg = TrainConfig {
        batch_size: 8,
        patch_size: 64,
        optimizer: OptimizerKind::AdamW,
        initial_lr: 3e-3,
        weight_decay: 1e-5,
        lr_decay_gamma: 1.0,
        early_stop_patience: 100,
        max_epochs: 31, // 16 steps per epoch -> 496 optimization steps
        swa: false,
        seed: 11,
    };
    let started = std::time::Instant::now();
    let report = train(&mut model, &train_data, &val, &cfg, &out_dir)?;
    println!(
        "trained {} steps over {} epochs in {:.1}s; best val loss {:.4} at epoch {}",
        report.optimization_steps,
        report.epochs.len(),
        started.elapsed().as_secs_f64(),
        report.best_val_loss,
        report.best_epoch,
    );

    let best = Model::load(&report.checkpoint)?;
    let mut lung_scores = Vec::new();
    let mut finding_scores = Vec::new();
    for (ct, labels) in &train_data.volumes {
        let pred = volume_predict(&best, ct)?;
        let lung = dice(
            &BinaryMask3D::lung_from(&pred, ct.spacing),
            &BinaryMask3D::lung_from(labels, ct.spacing),
        )?;
        let findings = dice(
            &BinaryMask3D::findings_from(&pred, ct.spacing),
            &BinaryMask3D::findings_from(labels, ct.spacing),
        )?;
        println!("{}: lung dice {lung:.4}, findings dice {findings:.4}", ct.subject_id);
        lung_scores.push(lung);
        finding_scores.push(findings);
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    println!(
        "training-set mean dice: lung {:.4}, findings {:.4}",
        mean(&lung_scores),
        mean(&finding_scores)
    );
    Ok(())
}
