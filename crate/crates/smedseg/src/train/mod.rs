//! Training protocol: random-patch epochs, Adam/AdamW, exponential
//! learning-rate decay, early stopping on validation loss, and
//! best-checkpoint selection — plus the ablation matrix runner.
//!
//! One training coordinator owns the model; checkpoint writes go through a
//! temp file and an atomic rename.

pub mod ablation;
pub mod loss;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_slice_samples, sample_patch, CtVolume, DataError, LabelVolume};
use crate::derive_seed;
use crate::model::{Model, ModelError};
use crate::nn::layers::Mode;
use crate::nn::optim::exponential_lr;
use crate::nn::{NoGradGuard, Optimizer, OptimizerKind, Tensor};

pub use ablation::{
    run_ablation_matrix, table1_flag_rows, AblationFlag, AblationRow, AblationSpec,
    AblationTable, EvalClass,
};
pub use loss::{dice_bce_loss, loss_value, one_hot_targets};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything that determines one training run besides the model itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_patch")]
    pub patch_size: usize,
    #[serde(default = "d_opt")]
    pub optimizer: OptimizerKind,
    #[serde(default = "d_lr")]
    pub initial_lr: f64,
    /// Decoupled decay under AdamW, classic L2 under Adam; 0 disables.
    #[serde(default)]
    pub weight_decay: f64,
    /// Per-epoch exponential decay factor; 1.0 disables the schedule.
    #[serde(default = "d_gamma")]
    pub lr_decay_gamma: f64,
    #[serde(default = "d_patience")]
    pub early_stop_patience: usize,
    #[serde(default = "d_epochs")]
    pub max_epochs: usize,
    /// Train only on slices with annotation.
    #[serde(default)]
    pub swa: bool,
    #[serde(default)]
    pub seed: u64,
}

fn d_batch() -> usize {
    30
}
fn d_patch() -> usize {
    128
}
fn d_opt() -> OptimizerKind {
    OptimizerKind::Adam
}
fn d_lr() -> f64 {
    1e-4
}
fn d_gamma() -> f64 {
    1.0
}
fn d_patience() -> usize {
    100
}
fn d_epochs() -> usize {
    1000
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: d_batch(),
            patch_size: d_patch(),
            optimizer: d_opt(),
            initial_lr: d_lr(),
            weight_decay: 0.0,
            lr_decay_gamma: d_gamma(),
            early_stop_patience: d_patience(),
            max_epochs: d_epochs(),
            swa: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.patch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config(
                "batch_size, patch_size, and max_epochs must be positive".into(),
            ));
        }
        if self.early_stop_patience < 1 {
            return Err(TrainError::Config("early_stop_patience must be >= 1".into()));
        }
        if !(self.initial_lr > 0.0) {
            return Err(TrainError::Config("initial_lr must be positive".into()));
        }
        if !(self.lr_decay_gamma > 0.0 && self.lr_decay_gamma <= 1.0) {
            return Err(TrainError::Config("lr_decay_gamma must be in (0, 1]".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// An owned set of (CT, label) volume pairs.
pub struct Dataset {
    pub volumes: Vec<(CtVolume, LabelVolume)>,
}

impl Dataset {
    pub fn new(volumes: Vec<(CtVolume, LabelVolume)>) -> Self {
        Dataset { volumes }
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.volumes.iter().map(|(ct, _)| ct.subject_id.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate in effect during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub checkpoint: PathBuf,
    pub optimization_steps: usize,
    /// Wall-clock time; excluded from serialized reports so identical runs
    /// produce identical files (timing belongs in the sidecar log).
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Early-stopping state: training stops once the validation loss has not
/// strictly improved for `patience` consecutive epochs. The checkpoint with
/// the lowest validation loss is always the one reported.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    epochs_since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    /// New best validation loss; checkpoint now.
    Improved,
    /// No improvement, but patience is not exhausted.
    Continue,
    /// Patience exhausted; halt after this epoch.
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epochs_since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.epochs_since_best = 0;
            StopDecision::Improved
        } else {
            self.epochs_since_best += 1;
            if self.epochs_since_best >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

/// Deterministic full-slice validation loss: every slice of every validation
/// volume, corner-cropped to the model's size granularity when a slice
/// dimension is not a multiple of it.
fn validation_loss(model: &Model, data: &Dataset, num_classes: usize) -> Result<f64, TrainError> {
    let _guard = NoGradGuard::new();
    let mult = model.config().required_multiple();
    let mut total = 0.0;
    let mut count = 0usize;
    for (ct, labels) in &data.volumes {
        let samples = make_slice_samples(ct, labels, false)?;
        for sample in &samples {
            let (_, h, w) = ct.shape();
            let (ch, cw) = ((h / mult) * mult, (w / mult) * mult);
            if ch == 0 || cw == 0 {
                return Err(TrainError::Config(format!(
                    "validation slices {h}x{w} are smaller than the model granularity {mult}"
                )));
            }
            let size = ch.min(cw);
            let (input, target) = sample.crop(0, 0, size);
            let batch = input.reshaped(&[1, 3, size, size]);
            let out = model.forward_batch(&batch, Mode::Eval)?;
            let target_t = one_hot_targets(&[target], num_classes);
            total += loss_value(&out.value(), &target_t);
            count += 1;
        }
    }
    if count == 0 {
        return Err(TrainError::EmptyDataset("validation"));
    }
    Ok(total / count as f64)
}

/// Optimizes the model on random patches with early stopping; saves a
/// checkpoint on every validation improvement and reports the best one.
///
/// An epoch is one pass over all training slice samples with one random
/// patch each. The learning rate after `e` completed epochs is
/// `initial_lr * gamma^e` exactly.
pub fn train(
    model: &mut Model,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val_data.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    std::fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let num_classes = model.config().num_classes;
    let checkpoint_path = out_dir.join("best.ckpt");

    let mut patch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "patch-sampler"));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "epoch-shuffle"));

    let params = model.parameters();
    let mut optimizer = Optimizer::new(cfg.optimizer, &params, cfg.initial_lr, cfg.weight_decay);

    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        checkpoint: checkpoint_path.clone(),
        optimization_steps: 0,
        wall_seconds: 0.0,
    };
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);

    // Slice samples are index views over the volumes; build them once.
    let mut all_samples = Vec::new();
    for (ct, labels) in &train_data.volumes {
        all_samples.extend(make_slice_samples(ct, labels, cfg.swa)?);
    }
    if all_samples.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }

    for epoch in 1..=cfg.max_epochs {
        let lr = exponential_lr(cfg.initial_lr, cfg.lr_decay_gamma, epoch - 1);
        optimizer.set_lr(lr);

        // One random patch per training sample, in shuffled order.
        let mut order: Vec<usize> = (0..all_samples.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rand::Rng::random_range(&mut shuffle_rng, 0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &si in chunk {
                let (patch, target) =
                    sample_patch(&all_samples[si], cfg.patch_size, &mut patch_rng)?;
                inputs.push(patch);
                targets.push(target);
            }
            let n = inputs.len();
            let ps = cfg.patch_size;
            let mut batch = Tensor::zeros(&[n, 3, ps, ps]);
            for (i, patch) in inputs.iter().enumerate() {
                batch.data_mut()[i * 3 * ps * ps..(i + 1) * 3 * ps * ps]
                    .copy_from_slice(patch.data().data());
            }
            let target_t = one_hot_targets(&targets, num_classes);

            let out = model.forward_batch(&batch, Mode::Train)?;
            let loss = dice_bce_loss(&out, &target_t);
            let loss_val = loss.value().item();
            if !loss_val.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            loss.backward();
            optimizer.step(&params);
            model.zero_grad();
            report.optimization_steps += 1;
            epoch_loss += loss_val * n as f64;
        }
        let train_loss = epoch_loss / order.len() as f64;

        let val_loss = validation_loss(model, val_data, num_classes)?;
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        report.epochs.push(EpochStats { epoch, train_loss, val_loss, lr });

        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => {
                report.best_val_loss = stopper.best;
                report.best_epoch = stopper.best_epoch;
                model.save(&checkpoint_path)?;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }

    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_phantom_dataset;
    use crate::model::{build_model, ModelConfig};

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset::new(make_phantom_dataset(n, (8, 64, 64), &mut rng).unwrap())
    }

    fn fast_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            patch_size: 64,
            optimizer: OptimizerKind::AdamW,
            initial_lr: 2e-3,
            weight_decay: 1e-5,
            lr_decay_gamma: 1.0,
            early_stop_patience: 100,
            max_epochs: 2,
            swa: false,
            seed: 3,
        }
    }

    #[test]
    fn short_run_produces_checkpoint_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = build_model(&ModelConfig::micro(1)).unwrap();
        let train_data = tiny_dataset(2, 0);
        let val_data = tiny_dataset(1, 9);
        let report = train(&mut model, &train_data, &val_data, &fast_cfg(), dir.path()).unwrap();
        assert_eq!(report.epochs.len(), 2);
        assert!(report.checkpoint.exists());
        assert!(report.best_epoch >= 1);
        assert!(report.best_val_loss.is_finite());
        // best equals the minimum of recorded validation losses
        let min_val = report.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_val_loss, min_val);
        assert_eq!(report.optimization_steps, 2 * 2); // 16 samples / 8 per batch, 2 epochs
    }

    #[test]
    fn early_stopping_follows_patience_rule() {
        // Patience 2 with validation losses [1.0, 0.9, 0.95, 0.97] stops
        // after epoch 4 with best at epoch 2.
        let mut stopper = EarlyStopping::new(2);
        assert_eq!(stopper.observe(1, 1.0), StopDecision::Improved);
        assert_eq!(stopper.observe(2, 0.9), StopDecision::Improved);
        assert_eq!(stopper.observe(3, 0.95), StopDecision::Continue);
        assert_eq!(stopper.observe(4, 0.97), StopDecision::Stop);
        assert_eq!(stopper.best_epoch, 2);
        assert_eq!(stopper.best, 0.9);
    }

    #[test]
    fn early_stopping_never_keeps_a_non_minimal_checkpoint() {
        // Equal-to-best is not an improvement; only strict decreases move
        // the checkpoint.
        let mut stopper = EarlyStopping::new(10);
        let sequence = [0.8, 0.8, 0.9, 0.7, 0.7, 0.75];
        let mut n_improved = 0;
        for (i, &v) in sequence.iter().enumerate() {
            if stopper.observe(i + 1, v) == StopDecision::Improved {
                n_improved += 1;
            }
        }
        assert_eq!(n_improved, 2);
        assert_eq!(stopper.best_epoch, 4);
        assert_eq!(stopper.best, 0.7);
    }

    #[test]
    fn lr_schedule_is_exact_exponential() {
        let cfg = TrainConfig {
            lr_decay_gamma: 0.985,
            max_epochs: 12,
            ..fast_cfg()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut model = build_model(&ModelConfig::nano(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs = make_phantom_dataset(2, (8, 64, 64), &mut rng).unwrap();
        let train_data = Dataset::new(pairs);
        let val_data = tiny_dataset(1, 5);
        let cfg = TrainConfig { patch_size: 16, batch_size: 16, ..cfg };
        let report = train(&mut model, &train_data, &val_data, &cfg, dir.path()).unwrap();
        for stats in &report.epochs {
            let expected = 2e-3 * 0.985f64.powi(stats.epoch as i32 - 1);
            assert!(
                ((stats.lr - expected) / expected).abs() < 1e-12,
                "epoch {}: lr {} vs {expected}",
                stats.epoch,
                stats.lr
            );
        }
    }

    #[test]
    fn empty_datasets_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = build_model(&ModelConfig::nano(0)).unwrap();
        let empty = Dataset::new(Vec::new());
        let data = tiny_dataset(1, 0);
        assert!(matches!(
            train(&mut model, &empty, &data, &fast_cfg(), dir.path()),
            Err(TrainError::EmptyDataset("training"))
        ));
        assert!(matches!(
            train(&mut model, &data, &empty, &fast_cfg(), dir.path()),
            Err(TrainError::EmptyDataset("validation"))
        ));
    }

    #[test]
    fn one_small_step_decreases_the_batch_loss() {
        use crate::nn::{Optimizer, Tensor};
        let model = build_model(&ModelConfig::nano(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let side = 16;
        let input = Tensor::from_vec(
            &[2, 3, side, side],
            (0..2 * 3 * side * side)
                .map(|_| rand::Rng::random_range(&mut rng, -800.0..100.0))
                .collect(),
        );
        let labels: Vec<ndarray::Array2<u8>> = (0..2)
            .map(|_| {
                ndarray::Array2::from_shape_fn((side, side), |_| {
                    rand::Rng::random_range(&mut rng, 0..3u8)
                })
            })
            .collect();
        let target = one_hot_targets(&labels, 2);
        let params = model.parameters();
        let mut opt = Optimizer::new(OptimizerKind::Adam, &params, 1e-5, 0.0);

        let out = model.forward_batch(&input, Mode::Train).unwrap();
        let loss = dice_bce_loss(&out, &target);
        let before = loss.value().item();
        loss.backward();
        opt.step(&params);
        model.zero_grad();
        let after = dice_bce_loss(&model.forward_batch(&input, Mode::Train).unwrap(), &target)
            .value()
            .item();
        assert!(after < before, "loss went {before} -> {after}");
    }

    #[test]
    fn deterministic_given_seed() {
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let mut model = build_model(&ModelConfig::micro(7)).unwrap();
            let train_data = tiny_dataset(2, 1);
            let val_data = tiny_dataset(1, 2);
            let cfg = TrainConfig { max_epochs: 2, ..fast_cfg() };
            let report = train(&mut model, &train_data, &val_data, &cfg, dir.path()).unwrap();
            report
                .epochs
                .iter()
                .map(|e| (e.train_loss, e.val_loss))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
