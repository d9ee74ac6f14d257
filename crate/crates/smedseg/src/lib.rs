//! Lung lesion segmentation for chest CT.
//!
//! This crate implements a 2.5D fully convolutional segmentation pipeline
//! around an EfficientDet-style network with exponential stride compression
//! (ESC) channel gating, together with the machinery needed to study it:
//!
//! - [`model`] — the network: backbone adapter, bidirectional feature
//!   pyramid, ESC gating, and segmentation head, with deterministic
//!   initialization and bit-exact checkpoints.
//! - [`data`] — CT/label volume I/O (NIfTI-1 and a raw JSON+binary fallback),
//!   2.5D slice triplets, random patch extraction, subject-level splits, and
//!   a synthetic phantom generator for desk-scale experiments.
//! - [`train`] — Dice+BCE loss, the training loop (AdamW, exponential LR
//!   decay, early stopping on validation loss), and the ablation harness.
//! - [`metrics`] — 3D Dice, FP/FN error rates, volume-level prediction, and
//!   the Wilcoxon rank-sum test.
//! - [`stats`] — percentage-of-involvement radiomics (whole lung and per
//!   lobe), Welch's t-test, and OLS regression with inference.
//! - [`cli`] — the batch command-line front end (`smedseg` binary).
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod cli;
pub mod data;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod stats;
pub mod train;

/// Derives a module-specific seed from the user-facing seed by stable
/// hashing (FNV-1a), so one `--seed` flag drives every random stream without
/// correlating them.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in seed.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
