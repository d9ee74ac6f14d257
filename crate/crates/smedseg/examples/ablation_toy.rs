//! Runs a small ablation matrix on phantom data and prints the resulting
//! table: baseline, ESC only, and the full proposed modification set.
//!
//! The twelve documented flag combinations are available through
//! `table1_flag_rows()`; this example keeps to three rows so it finishes in
//! about a minute.
//!
//! ```text
//! cargo run --example ablation_toy
//! ```

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smedseg::data::make_phantom_dataset;
use smedseg::model::ModelConfig;
use smedseg::train::{
    run_ablation_matrix, AblationFlag, AblationSpec, Dataset, EvalClass, TrainConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = std::env::temp_dir().join("smedseg_ablation_toy");
    std::fs::create_dir_all(&out_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let volumes = make_phantom_dataset(4, (8, 64, 64), &mut rng)?;
    let val = Dataset::new(volumes[3..].to_vec());
    let train_data = Dataset::new(volumes[..3].to_vec());

    let spec = AblationSpec {
        model: ModelConfig {
            patch_size: 32,
            bifpn_levels: 2,
            bifpn_channels: 8,
            bifpn_repeats: 1,
            stage_widths: vec![8, 12],
            seed: 5,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            batch_size: 8,
            patch_size: 32,
            initial_lr: 2e-3,
            max_epochs: 4,
            seed: 5,
            ..TrainConfig::default()
        },
        // Desk-scale stand-ins for the increased patch/batch values.
        ips_patch_size: 64,
        ibs_batch_size: 12,
        adamw_lr: 2e-3,
        eval_class: EvalClass::Lung,
        ..AblationSpec::default()
    };
    use AblationFlag::*;
    let rows: Vec<BTreeSet<AblationFlag>> = vec![
        BTreeSet::new(),
        [Esc].into_iter().collect(),
        [Esc, Ips, Ibs, Swa, Wlrd, Ups, Aw].into_iter().collect(),
    ];

    let table = run_ablation_matrix(&spec, &rows, &train_data, &val, &out_dir)?;
    println!("{}", table.to_text());
    println!("csv:\n{}", table.to_csv());
    Ok(())
}
