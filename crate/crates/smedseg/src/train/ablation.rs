//! Ablation matrix: named modification flags, their deterministic mapping
//! onto model/train configs, and a runner that trains every row with a
//! shared seed and reports per-row Dice with a Wilcoxon comparison against
//! the first (baseline) row.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::metrics::{compare_runs, dice, volume_predict, BinaryMask3D, DiceReport};
use crate::model::{BackboneKind, Model, ModelConfig};
use crate::nn::OptimizerKind;

use super::{train, Dataset, TrainConfig, TrainError};

/// The studied modifications: exponential stride compression, increased
/// patch size, increased batch size, slices-with-annotation sampling,
/// weight + learning-rate decay, ConvNext features, bilinear upsampling,
/// and the AdamW optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationFlag {
    #[serde(rename = "ESC")]
    Esc,
    #[serde(rename = "IPS")]
    Ips,
    #[serde(rename = "IBS")]
    Ibs,
    #[serde(rename = "SWA")]
    Swa,
    #[serde(rename = "WLRD")]
    Wlrd,
    #[serde(rename = "CNF")]
    Cnf,
    #[serde(rename = "UPS")]
    Ups,
    #[serde(rename = "AW")]
    Aw,
}

impl AblationFlag {
    pub const ALL: [AblationFlag; 8] = [
        AblationFlag::Esc,
        AblationFlag::Ips,
        AblationFlag::Ibs,
        AblationFlag::Swa,
        AblationFlag::Wlrd,
        AblationFlag::Cnf,
        AblationFlag::Ups,
        AblationFlag::Aw,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationFlag::Esc => "ESC",
            AblationFlag::Ips => "IPS",
            AblationFlag::Ibs => "IBS",
            AblationFlag::Swa => "SWA",
            AblationFlag::Wlrd => "WLRD",
            AblationFlag::Cnf => "CNF",
            AblationFlag::Ups => "UPS",
            AblationFlag::Aw => "AW",
        }
    }
}

impl fmt::Display for AblationFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationFlag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ESC" => Ok(AblationFlag::Esc),
            "IPS" => Ok(AblationFlag::Ips),
            "IBS" => Ok(AblationFlag::Ibs),
            "SWA" => Ok(AblationFlag::Swa),
            "WLRD" => Ok(AblationFlag::Wlrd),
            "CNF" => Ok(AblationFlag::Cnf),
            "UPS" => Ok(AblationFlag::Ups),
            "AW" => Ok(AblationFlag::Aw),
            other => Err(format!("unknown ablation flag {other:?}")),
        }
    }
}

/// Which class mask the per-volume Dice evaluation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalClass {
    Lung,
    Findings,
}

/// Base configuration plus the magnitudes each flag switches in. Defaults
/// carry the full-scale values (patch 256, batch 60, weight decay 1e-5,
/// gamma 0.985, AdamW at 1e-4); desk-scale runs shrink them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default = "d_ips")]
    pub ips_patch_size: usize,
    #[serde(default = "d_ibs")]
    pub ibs_batch_size: usize,
    #[serde(default = "d_wd")]
    pub wlrd_weight_decay: f64,
    #[serde(default = "d_wlrd_gamma")]
    pub wlrd_gamma: f64,
    #[serde(default = "d_aw_lr")]
    pub adamw_lr: f64,
    #[serde(default = "d_eval_class")]
    pub eval_class: EvalClass,
}

fn d_ips() -> usize {
    256
}
fn d_ibs() -> usize {
    60
}
fn d_wd() -> f64 {
    1e-5
}
fn d_wlrd_gamma() -> f64 {
    0.985
}
fn d_aw_lr() -> f64 {
    1e-4
}
fn d_eval_class() -> EvalClass {
    EvalClass::Findings
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ips_patch_size: d_ips(),
            ibs_batch_size: d_ibs(),
            wlrd_weight_decay: d_wd(),
            wlrd_gamma: d_wlrd_gamma(),
            adamw_lr: d_aw_lr(),
            eval_class: d_eval_class(),
        }
    }
}

/// One fully resolved experiment row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub index: usize,
    pub flags: BTreeSet<AblationFlag>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl AblationSpec {
    /// Maps a flag set onto concrete configs. The empty set reproduces the
    /// baseline: EfficientNet-style backbone, no ESC, learned
    /// transposed-convolution upsampling, plain Adam, no decay.
    pub fn resolve(&self, index: usize, flags: &BTreeSet<AblationFlag>) -> AblationRow {
        let mut model = self.model.clone();
        let mut train = self.train.clone();
        model.use_esc = flags.contains(&AblationFlag::Esc);
        model.use_bilinear_upsample = flags.contains(&AblationFlag::Ups);
        model.backbone = if flags.contains(&AblationFlag::Cnf) {
            BackboneKind::ConvnextStyle
        } else {
            BackboneKind::EfficientnetStyle
        };
        if flags.contains(&AblationFlag::Ips) {
            model.patch_size = self.ips_patch_size;
            train.patch_size = self.ips_patch_size;
        }
        if flags.contains(&AblationFlag::Ibs) {
            train.batch_size = self.ibs_batch_size;
        }
        train.swa = flags.contains(&AblationFlag::Swa);
        if flags.contains(&AblationFlag::Wlrd) {
            train.weight_decay = self.wlrd_weight_decay;
            train.lr_decay_gamma = self.wlrd_gamma;
        } else {
            train.weight_decay = 0.0;
            train.lr_decay_gamma = 1.0;
        }
        if flags.contains(&AblationFlag::Aw) {
            train.optimizer = OptimizerKind::AdamW;
            train.initial_lr = self.adamw_lr;
        } else {
            train.optimizer = OptimizerKind::Adam;
        }
        AblationRow { index, flags: flags.clone(), model, train }
    }
}

/// The twelve studied flag combinations, baseline first and the full
/// proposed set (everything except CNF) last.
pub fn table1_flag_rows() -> Vec<BTreeSet<AblationFlag>> {
    use AblationFlag::*;
    let rows: Vec<Vec<AblationFlag>> = vec![
        vec![],
        vec![Wlrd],
        vec![Ips, Swa, Wlrd, Cnf, Aw],
        vec![Ips],
        vec![Ips, Swa],
        vec![Ips, Swa, Wlrd, Aw],
        vec![Ips, Swa],
        vec![Ips, Swa, Wlrd],
        vec![Ips, Swa, Wlrd, Aw],
        vec![Ips, Swa, Wlrd, Ups, Aw],
        vec![Ips, Ibs, Swa, Wlrd, Ups, Aw],
        vec![Esc, Ips, Ibs, Swa, Wlrd, Ups, Aw],
    ];
    rows.into_iter().map(|r| r.into_iter().collect()).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub row: AblationRow,
    pub dice: Option<DiceReport>,
    pub error: Option<String>,
    pub p_vs_baseline: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationOutcome>,
}

impl AblationTable {
    /// `row,flags,dice_mean,dice_std,p_vs_baseline` with stable formatting
    /// so reruns are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,flags,dice_mean,dice_std,p_vs_baseline\n");
        for outcome in &self.rows {
            let flags = flags_label(&outcome.row.flags);
            let (mean, std) = match &outcome.dice {
                Some(d) => (format!("{:.6}", d.mean), format!("{:.6}", d.std)),
                None => (String::new(), String::new()),
            };
            let p = outcome
                .p_vs_baseline
                .map(|p| format!("{p:.6}"))
                .unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", outcome.row.index, flags, mean, std, p));
        }
        out
    }

    /// Aligned text rendering with one column per flag.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:>3} ", "row"));
        for f in AblationFlag::ALL {
            out.push_str(&format!("{:>5}", f.name()));
        }
        out.push_str(&format!("  {:>17}  {:>13}\n", "dice (mean±std)", "p_vs_baseline"));
        for outcome in &self.rows {
            out.push_str(&format!("{:>3} ", outcome.row.index));
            for f in AblationFlag::ALL {
                out.push_str(&format!(
                    "{:>5}",
                    if outcome.row.flags.contains(&f) { "x" } else { "." }
                ));
            }
            match (&outcome.dice, &outcome.error) {
                (Some(d), _) => {
                    out.push_str(&format!("  {:>8.4}±{:<8.4}", d.mean, d.std));
                }
                (None, Some(e)) => out.push_str(&format!("  failed: {e}")),
                (None, None) => out.push_str("  -"),
            }
            if let Some(p) = outcome.p_vs_baseline {
                out.push_str(&format!("  {p:>13.6}"));
            }
            out.push('\n');
        }
        out
    }
}

fn flags_label(flags: &BTreeSet<AblationFlag>) -> String {
    if flags.is_empty() {
        "baseline".to_string()
    } else {
        flags.iter().map(|f| f.name()).collect::<Vec<_>>().join("+")
    }
}

fn evaluate_row(
    model: &Model,
    val_data: &Dataset,
    eval_class: EvalClass,
) -> Result<DiceReport, TrainError> {
    let mut scores = Vec::new();
    for (ct, labels) in &val_data.volumes {
        let pred = volume_predict(model, ct).map_err(|e| TrainError::Config(e.to_string()))?;
        let (pm, gm) = match eval_class {
            EvalClass::Lung => (
                BinaryMask3D::lung_from(&pred, ct.spacing),
                BinaryMask3D::lung_from(labels, ct.spacing),
            ),
            EvalClass::Findings => (
                BinaryMask3D::findings_from(&pred, ct.spacing),
                BinaryMask3D::findings_from(labels, ct.spacing),
            ),
        };
        let d = dice(&pm, &gm).map_err(|e| TrainError::Config(e.to_string()))?;
        scores.push((ct.subject_id.clone(), d));
    }
    Ok(DiceReport::from_scores(scores))
}

/// Trains every row with the shared seed, evaluates 3D Dice on the shared
/// validation split using the row's best checkpoint, and attaches Wilcoxon
/// p-values against the first row. A row's failure is recorded in its
/// outcome without aborting the others.
pub fn run_ablation_matrix(
    spec: &AblationSpec,
    flag_rows: &[BTreeSet<AblationFlag>],
    train_data: &Dataset,
    val_data: &Dataset,
    out_dir: &Path,
) -> Result<AblationTable, TrainError> {
    std::fs::create_dir_all(out_dir)?;
    let mut outcomes: Vec<AblationOutcome> = Vec::with_capacity(flag_rows.len());
    for (index, flags) in flag_rows.iter().enumerate() {
        let row = spec.resolve(index, flags);
        let row_dir = out_dir.join(format!("row_{index:02}"));
        let result = (|| -> Result<DiceReport, TrainError> {
            let mut model = crate::model::build_model(&row.model)?;
            let report = train(&mut model, train_data, val_data, &row.train, &row_dir)?;
            // Evaluate the weights with the lowest validation loss.
            let best = Model::load(&report.checkpoint)?;
            evaluate_row(&best, val_data, spec.eval_class)
        })();
        let (dice, error) = match result {
            Ok(report) => (Some(report), None),
            Err(e) => (None, Some(e.to_string())),
        };
        outcomes.push(AblationOutcome { row, dice, error, p_vs_baseline: None });
    }
    // Pairwise Wilcoxon against the baseline row (row 0 compares to itself
    // at p = 1 by definition of the test on identical samples).
    if let Some(baseline) = outcomes[0].dice.clone() {
        for outcome in outcomes.iter_mut() {
            if let Some(d) = &outcome.dice {
                outcome.p_vs_baseline = compare_runs(&baseline, d).ok();
            }
        }
    }
    Ok(AblationTable { rows: outcomes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(flags: &[AblationFlag]) -> BTreeSet<AblationFlag> {
        flags.iter().copied().collect()
    }

    #[test]
    fn twelve_documented_rows_resolve() {
        let rows = table1_flag_rows();
        assert_eq!(rows.len(), 12);
        assert!(rows[0].is_empty());
        let last = &rows[11];
        assert!(last.contains(&AblationFlag::Esc));
        assert!(!last.contains(&AblationFlag::Cnf));
        assert_eq!(last.len(), 7);

        let spec = AblationSpec::default();
        for (i, flags) in rows.iter().enumerate() {
            let row = spec.resolve(i, flags);
            row.model.validate().unwrap();
            row.train.validate().unwrap();
        }
    }

    #[test]
    fn empty_flag_set_is_the_baseline() {
        let spec = AblationSpec::default();
        let row = spec.resolve(0, &set(&[]));
        assert!(!row.model.use_esc);
        assert!(!row.model.use_bilinear_upsample);
        assert_eq!(row.model.backbone, BackboneKind::EfficientnetStyle);
        assert_eq!(row.train.optimizer, OptimizerKind::Adam);
        assert_eq!(row.train.weight_decay, 0.0);
        assert_eq!(row.train.lr_decay_gamma, 1.0);
        assert!(!row.train.swa);
        assert_eq!(row.train.batch_size, 30);
        assert_eq!(row.train.patch_size, 128);
    }

    #[test]
    fn full_proposed_row_switches_everything_but_backbone() {
        use AblationFlag::*;
        let spec = AblationSpec::default();
        let row = spec.resolve(11, &set(&[Esc, Ips, Ibs, Swa, Wlrd, Ups, Aw]));
        assert!(row.model.use_esc);
        assert!(row.model.use_bilinear_upsample);
        assert_eq!(row.model.backbone, BackboneKind::EfficientnetStyle);
        assert_eq!(row.model.patch_size, 256);
        assert_eq!(row.train.patch_size, 256);
        assert_eq!(row.train.batch_size, 60);
        assert!(row.train.swa);
        assert_eq!(row.train.optimizer, OptimizerKind::AdamW);
        assert_eq!(row.train.initial_lr, 1e-4);
        assert_eq!(row.train.weight_decay, 1e-5);
        assert_eq!(row.train.lr_decay_gamma, 0.985);
    }

    #[test]
    fn flags_parse_and_display() {
        for f in AblationFlag::ALL {
            assert_eq!(f.name().parse::<AblationFlag>().unwrap(), f);
        }
        assert!("XYZ".parse::<AblationFlag>().is_err());
        assert_eq!(flags_label(&set(&[])), "baseline");
        assert_eq!(
            flags_label(&set(&[AblationFlag::Ups, AblationFlag::Esc])),
            "ESC+UPS"
        );
    }

    #[test]
    fn csv_has_expected_header_and_rows() {
        let spec = AblationSpec::default();
        let table = AblationTable {
            rows: vec![
                AblationOutcome {
                    row: spec.resolve(0, &set(&[])),
                    dice: Some(DiceReport::from_scores(vec![
                        ("a".into(), 0.5),
                        ("b".into(), 0.7),
                    ])),
                    error: None,
                    p_vs_baseline: Some(1.0),
                },
                AblationOutcome {
                    row: spec.resolve(1, &set(&[AblationFlag::Esc])),
                    dice: None,
                    error: Some("boom".into()),
                    p_vs_baseline: None,
                },
            ],
        };
        let csv = table.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "row,flags,dice_mean,dice_std,p_vs_baseline");
        assert_eq!(lines.next().unwrap(), "0,baseline,0.600000,0.141421,1.000000");
        assert_eq!(lines.next().unwrap(), "1,ESC,,,");
        assert!(table.to_text().contains("failed: boom"));
    }
}
