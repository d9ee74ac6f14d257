//! Batch command-line front end.
//!
//! One binary, one subcommand per pipeline stage: `make-phantom`, `train`,
//! `predict`, `evaluate`, `ablate`, `radiomics`, `cohort-stats`. All
//! randomness flows from a single `--seed`; module seeds are derived from
//! it by stable hashing. Given `--force` and a fixed seed, every subcommand
//! is idempotent with byte-identical outputs — wall-clock timing lives only
//! in the `run.log` sidecar.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    self, list_dataset, load_volume, make_phantom_dataset, phantom_lobes, split_subjects,
    DataError,
};
use crate::derive_seed;
use crate::metrics::{dice, volume_predict, BinaryMask3D, DiceReport, MetricError};
use crate::model::{build_model, Model, ModelConfig, ModelError};
use crate::stats::{
    cohort_analysis, lobar_poi, read_poi_csv, Lobe, LobeMaskSet, StatsError, POI_CSV_HEADER,
};
use crate::train::{
    run_ablation_matrix, table1_flag_rows, train, AblationFlag, AblationSpec, Dataset,
    TrainConfig, TrainError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidPatchSize { .. } | ModelError::InvalidConfig(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config(m) => CliError::Usage(m),
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::DegenerateSample(_)
            | StatsError::RankDeficient { .. }
            | StatsError::EmptyRegion => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "smedseg",
    version,
    about = "Lung lesion segmentation for chest CT: training, inference, ablations, and involvement statistics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Master seed; module seeds are derived from it by stable hashing.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads for data-parallel loops (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Chattier progress reporting on stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset (CT + labels + lobe masks).
    MakePhantom {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of volumes.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Volume shape as slices,height,width.
        #[arg(long, default_value = "16,64,64")]
        shape: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model from an experiment config on a volume directory.
    Train {
        /// Experiment config (JSON or TOML): model + train sections,
        /// optional ablation flag list.
        #[arg(long)]
        config: PathBuf,
        /// Directory of volumes with label siblings.
        #[arg(long)]
        data: PathBuf,
        /// Output directory (report.json, best.ckpt, split.json, run.log).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Segment one CT volume with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input CT volume (.nii, .nii.gz, or raw .json).
        #[arg(long)]
        input: PathBuf,
        /// Output label volume path; spacing is carried over.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare predicted label volumes against ground truth.
    Evaluate {
        /// Directory of predicted label volumes (named <subject>.<ext>).
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth label volumes with matching names.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run an ablation matrix and emit the per-row Dice table.
    Ablate {
        /// Matrix config (JSON or TOML): base experiment + flag rows.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compute percentage of involvement from per-subject mask files.
    Radiomics {
        /// Directory of <id>_findings, <id>_lung, <id>_lobes volumes.
        #[arg(long)]
        masks: PathBuf,
        /// Optional covariate table (subject_id,age,sex,days_dx_to_ct,vaccinated).
        #[arg(long)]
        covariates: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Cohort statistics over a POI record table.
    CohortStats {
        /// POI record CSV as written by `radiomics`.
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Entry point used by the binary; parses `std::env::args`.
pub fn run() -> i32 {
    run_from(std::env::args())
}

/// Testable entry point over explicit arguments.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successful exits.
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let common = match &cli.command {
        Command::MakePhantom { common, .. }
        | Command::Train { common, .. }
        | Command::Predict { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Ablate { common, .. }
        | Command::Radiomics { common, .. }
        | Command::CohortStats { common, .. } => common.clone(),
    };
    if let Some(workers) = common.workers {
        // Ignore failure: the global pool can only be installed once per
        // process (relevant when tests call run_from repeatedly).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build_global();
    }
    let result = match cli.command {
        Command::MakePhantom { out, count, shape, common } => {
            cmd_make_phantom(&out, count, &shape, &common)
        }
        Command::Train { config, data, out, common } => cmd_train(&config, &data, &out, &common),
        Command::Predict { checkpoint, input, out, common } => {
            cmd_predict(&checkpoint, &input, &out, &common)
        }
        Command::Evaluate { pred, gt, out, common } => cmd_evaluate(&pred, &gt, &out, &common),
        Command::Ablate { config, data, out, common } => cmd_ablate(&config, &data, &out, &common),
        Command::Radiomics { masks, covariates, out, common } => {
            cmd_radiomics(&masks, covariates.as_deref(), &out, &common)
        }
        Command::CohortStats { records, out, common } => cmd_cohort_stats(&records, &out, &common),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn ensure_writable(paths: &[PathBuf], force: bool) -> Result<(), CliError> {
    if force {
        return Ok(());
    }
    for p in paths {
        if p.exists() {
            return Err(CliError::Usage(format!(
                "{} exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    Ok(())
}

fn require_dir(path: &Path) -> Result<(), CliError> {
    if !path.is_dir() {
        return Err(CliError::Data(format!(
            "data directory {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn write_sidecar_log(out: &Path, lines: &[String]) -> Result<(), CliError> {
    let mut text = String::new();
    for l in lines {
        writeln!(text, "{l}").ok();
    }
    std::fs::write(out.join("run.log"), text)?;
    Ok(())
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize), CliError> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("cannot parse shape {s:?} (want z,y,x)")))?;
    if parts.len() != 3 {
        return Err(CliError::Usage(format!("shape {s:?} must have 3 components")));
    }
    Ok((parts[0], parts[1], parts[2]))
}

/// Loads a JSON (`.json`) or TOML (`.toml`) config file.
fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "json" => serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display()))),
        "toml" => toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display()))),
        other => Err(CliError::Usage(format!(
            "config {} has unsupported extension {other:?} (want .json or .toml)",
            path.display()
        ))),
    }
}

/// On-disk experiment description for `train`: model and train sections,
/// plus an optional ablation flag set applied through the standard flag
/// resolution.
#[derive(Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub flags: Option<BTreeSet<AblationFlag>>,
}

/// On-disk matrix description for `ablate`.
#[derive(Serialize, Deserialize)]
pub struct AblationMatrixConfig {
    pub base: AblationSpec,
    /// Explicit flag rows; leaving this empty and setting
    /// `use_documented_rows` selects the twelve studied combinations.
    #[serde(default)]
    pub rows: Vec<BTreeSet<AblationFlag>>,
    #[serde(default)]
    pub use_documented_rows: bool,
}

fn cmd_make_phantom(out: &Path, count: usize, shape: &str, common: &Common) -> Result<(), CliError> {
    let shape = parse_shape(shape)?;
    std::fs::create_dir_all(out)?;
    ensure_writable(&[out.join("phantom_000.nii.gz")], common.force)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(common.seed, "phantom"));
    let pairs = make_phantom_dataset(count, shape, &mut rng)?;
    for (ct, labels) in &pairs {
        let stem = &ct.subject_id;
        data::save_volume(&out.join(format!("{stem}.nii.gz")), ct)?;
        data::save_labels(&out.join(format!("{stem}_label.nii.gz")), labels, ct.spacing)?;
        let lobes = phantom_lobes(labels);
        data::io::save_coded(&out.join(format!("{stem}_lobes.nii.gz")), &lobes, ct.spacing)?;
        if common.verbose {
            eprintln!("wrote {stem}");
        }
    }
    write_sidecar_log(out, &[format!("make-phantom count={count} seed={}", common.seed)])?;
    Ok(())
}

/// Loads every volume (with required label sibling) in a directory.
fn load_labeled_dir(dir: &Path) -> Result<Dataset, CliError> {
    require_dir(dir)?;
    let mut volumes = Vec::new();
    for path in list_dataset(dir)? {
        let (ct, labels) = load_volume(&path)?;
        let labels = labels
            .ok_or_else(|| CliError::Data(format!("{} has no label sibling", path.display())))?;
        volumes.push((ct, labels));
    }
    if volumes.is_empty() {
        return Err(CliError::Data(format!("no volumes found under {}", dir.display())));
    }
    Ok(Dataset::new(volumes))
}

fn split_dataset(all: Dataset, seed: u64) -> Result<(Dataset, Dataset), CliError> {
    let ids = all.subject_ids();
    let manifest = split_subjects(&ids, seed)?;
    let mut train_vols = Vec::new();
    let mut val_vols = Vec::new();
    for pair in all.volumes {
        if manifest.train_ids.contains(&pair.0.subject_id) {
            train_vols.push(pair);
        } else {
            val_vols.push(pair);
        }
    }
    Ok((Dataset::new(train_vols), Dataset::new(val_vols)))
}

fn cmd_train(config: &Path, data_dir: &Path, out: &Path, common: &Common) -> Result<(), CliError> {
    let mut cfg: ExperimentConfig = load_config(config)?;
    if common.seed != 0 {
        cfg.model.seed = derive_seed(common.seed, "seg-model");
        cfg.train.seed = derive_seed(common.seed, "trainer");
    }
    let (model_cfg, train_cfg) = match &cfg.flags {
        Some(flags) => {
            let spec = AblationSpec {
                model: cfg.model.clone(),
                train: cfg.train.clone(),
                ..AblationSpec::default()
            };
            let row = spec.resolve(0, flags);
            (row.model, row.train)
        }
        None => (cfg.model.clone(), cfg.train.clone()),
    };
    std::fs::create_dir_all(out)?;
    ensure_writable(&[out.join("report.json"), out.join("best.ckpt")], common.force)?;

    let all = load_labeled_dir(data_dir)?;
    let split_seed =
        derive_seed(if common.seed != 0 { common.seed } else { train_cfg.seed }, "split");
    let manifest = split_subjects(&all.subject_ids(), split_seed)?;
    std::fs::write(
        out.join("split.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Data(e.to_string()))?,
    )?;
    let (train_data, val_data) = split_dataset(all, split_seed)?;

    if common.verbose {
        eprintln!(
            "training on {} volumes, validating on {}",
            train_data.volumes.len(),
            val_data.volumes.len()
        );
    }
    let mut model = build_model(&model_cfg)?;
    let report = train(&mut model, &train_data, &val_data, &train_cfg, out)?;
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?,
    )?;
    write_sidecar_log(
        out,
        &[
            format!("train config={} data={}", config.display(), data_dir.display()),
            format!("wall_seconds={:.3}", report.wall_seconds),
            format!("best_epoch={} best_val_loss={:.6}", report.best_epoch, report.best_val_loss),
        ],
    )?;
    Ok(())
}

fn cmd_predict(checkpoint: &Path, input: &Path, out: &Path, common: &Common) -> Result<(), CliError> {
    ensure_writable(&[out.to_path_buf()], common.force)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let model = Model::load(checkpoint)?;
    let (ct, _) = load_volume(input)?;
    let labels = volume_predict(&model, &ct)?;
    data::save_labels(out, &labels, ct.spacing)?;
    Ok(())
}

fn cmd_evaluate(pred_dir: &Path, gt_dir: &Path, out: &Path, common: &Common) -> Result<(), CliError> {
    require_dir(pred_dir)?;
    require_dir(gt_dir)?;
    std::fs::create_dir_all(out)?;
    ensure_writable(
        &[out.join("dice_lung.csv"), out.join("dice_findings.csv"), out.join("summary.json")],
        common.force,
    )?;
    let mut lung_scores = Vec::new();
    let mut findings_scores = Vec::new();
    let mut missing: Vec<String> = Vec::new();
    for gt_path in list_dataset(gt_dir)? {
        let name = gt_path.file_name().unwrap().to_str().unwrap().to_string();
        let pred_path = pred_dir.join(&name);
        if !pred_path.exists() {
            missing.push(name);
            continue;
        }
        let gt = data::io::load_labels(&gt_path, None)?;
        let pred = data::io::load_labels(&pred_path, None)?;
        let spacing = [1.0, 1.0, 1.0];
        let subject = name
            .trim_end_matches(".nii.gz")
            .trim_end_matches(".nii")
            .trim_end_matches(".json")
            .to_string();
        lung_scores.push((
            subject.clone(),
            dice(&BinaryMask3D::lung_from(&pred, spacing), &BinaryMask3D::lung_from(&gt, spacing))?,
        ));
        findings_scores.push((
            subject,
            dice(
                &BinaryMask3D::findings_from(&pred, spacing),
                &BinaryMask3D::findings_from(&gt, spacing),
            )?,
        ));
    }
    if lung_scores.is_empty() {
        return Err(CliError::Data(format!(
            "no evaluable pairs between {} and {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    let lung = DiceReport::from_scores(lung_scores);
    let findings = DiceReport::from_scores(findings_scores);
    lung.write_csv(&out.join("dice_lung.csv"))?;
    findings.write_csv(&out.join("dice_findings.csv"))?;
    let summary = serde_json::json!({
        "lung": lung.summary_json(),
        "findings": findings.summary_json(),
        "missing": missing,
    });
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| CliError::Data(e.to_string()))?,
    )?;
    Ok(())
}

fn cmd_ablate(config: &Path, data_dir: &Path, out: &Path, common: &Common) -> Result<(), CliError> {
    let mut cfg: AblationMatrixConfig = load_config(config)?;
    if common.seed != 0 {
        cfg.base.model.seed = derive_seed(common.seed, "seg-model");
        cfg.base.train.seed = derive_seed(common.seed, "trainer");
    }
    let rows = if cfg.rows.is_empty() {
        if cfg.use_documented_rows {
            table1_flag_rows()
        } else {
            return Err(CliError::Usage(
                "ablation config has no rows and use_documented_rows is false".into(),
            ));
        }
    } else {
        cfg.rows.clone()
    };
    std::fs::create_dir_all(out)?;
    ensure_writable(&[out.join("ablation.csv")], common.force)?;

    let all = load_labeled_dir(data_dir)?;
    let split_seed =
        derive_seed(if common.seed != 0 { common.seed } else { cfg.base.train.seed }, "split");
    let (train_data, val_data) = split_dataset(all, split_seed)?;
    if common.verbose {
        eprintln!("running {} ablation rows", rows.len());
    }
    let table = run_ablation_matrix(&cfg.base, &rows, &train_data, &val_data, out)?;
    std::fs::write(out.join("ablation.csv"), table.to_csv())?;
    std::fs::write(out.join("ablation.txt"), table.to_text())?;
    std::fs::write(
        out.join("ablation.json"),
        serde_json::to_string_pretty(&table).map_err(|e| CliError::Data(e.to_string()))?,
    )?;
    write_sidecar_log(out, &[format!("ablate rows={} seed={}", rows.len(), common.seed)])?;
    Ok(())
}

#[derive(Serialize, Deserialize, Default, Clone)]
struct CovariateRow {
    age: Option<f64>,
    sex: Option<u8>,
    days_dx_to_ct: Option<f64>,
    vaccinated: Option<bool>,
}

fn read_covariates(
    path: &Path,
) -> Result<std::collections::BTreeMap<String, CovariateRow>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("covariates {}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| CliError::Data(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let ci_id = col("subject_id").ok_or_else(|| {
        CliError::Usage(format!("covariates {} lacks a subject_id column", path.display()))
    })?;
    let (ci_age, ci_sex, ci_days, ci_vax) =
        (col("age"), col("sex"), col("days_dx_to_ct"), col("vaccinated"));
    let mut rows = std::collections::BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| CliError::Data(e.to_string()))?;
        let id = row.get(ci_id).unwrap_or("").to_string();
        let get_f =
            |ci: Option<usize>| ci.and_then(|c| row.get(c)).and_then(|v| v.trim().parse::<f64>().ok());
        let vaccinated = ci_vax.and_then(|c| row.get(c)).and_then(|v| match v.trim() {
            "1" | "true" => Some(true),
            "0" | "false" => Some(false),
            _ => None,
        });
        rows.insert(
            id,
            CovariateRow {
                age: get_f(ci_age),
                sex: get_f(ci_sex).map(|v| v as u8),
                days_dx_to_ct: get_f(ci_days),
                vaccinated,
            },
        );
    }
    Ok(rows)
}

fn cmd_radiomics(
    masks: &Path,
    covariates: Option<&Path>,
    out: &Path,
    common: &Common,
) -> Result<(), CliError> {
    require_dir(masks)?;
    std::fs::create_dir_all(out)?;
    ensure_writable(&[out.join("poi.csv"), out.join("radiomics.json")], common.force)?;
    let covariate_rows = match covariates {
        Some(path) => read_covariates(path)?,
        None => Default::default(),
    };

    // Subjects are discovered from their findings masks.
    let mut subjects: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(masks)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
        for ext in [".nii.gz", ".nii", ".json"] {
            if let Some(stem) = name.strip_suffix(&format!("_findings{ext}")) {
                subjects.push(stem.to_string());
                break;
            }
        }
    }
    subjects.sort();
    subjects.dedup();
    if subjects.is_empty() {
        return Err(CliError::Data(format!("no *_findings volumes under {}", masks.display())));
    }

    let find_file = |stem: &str, suffix: &str| -> Result<PathBuf, CliError> {
        for ext in [".nii.gz", ".nii", ".json"] {
            let p = masks.join(format!("{stem}_{suffix}{ext}"));
            if p.exists() {
                return Ok(p);
            }
        }
        Err(CliError::Data(format!(
            "missing {stem}_{suffix} volume under {}",
            masks.display()
        )))
    };

    let mut csv_out = String::from(POI_CSV_HEADER);
    csv_out.push('\n');
    let mut subject_reports = Vec::new();
    for subject in &subjects {
        if common.verbose {
            eprintln!("radiomics for {subject}");
        }
        let findings = data::io::load_coded(&find_file(subject, "findings")?, 1)?;
        let lung = data::io::load_coded(&find_file(subject, "lung")?, 1)?;
        let lobes_coded = data::io::load_coded(&find_file(subject, "lobes")?, 5)?;
        let spacing = [1.0, 1.0, 1.0];
        let findings_mask = BinaryMask3D::new(findings.map(|&v| v > 0), spacing);
        let lung_mask = BinaryMask3D::new(lung.map(|&v| v > 0), spacing);
        let lobeset = LobeMaskSet::from_coded(&lobes_coded, spacing)?;
        let result = lobar_poi(&findings_mask, &lobeset, &lung_mask)?;

        let cov = covariate_rows.get(subject).cloned().unwrap_or_default();
        let fmt_opt_f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let lobe_cell =
            |l: Lobe| result.per_lobe[&l].map(|v| v.to_string()).unwrap_or_default();
        csv_out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            subject,
            result.total,
            lobe_cell(Lobe::Lul),
            lobe_cell(Lobe::Lll),
            lobe_cell(Lobe::Rul),
            lobe_cell(Lobe::Rml),
            lobe_cell(Lobe::Rll),
            fmt_opt_f(cov.age),
            cov.sex.map(|s| s.to_string()).unwrap_or_default(),
            fmt_opt_f(cov.days_dx_to_ct),
            cov.vaccinated.map(|v| u8::from(v).to_string()).unwrap_or_default(),
        ));
        subject_reports.push(serde_json::json!({
            "subject_id": subject,
            "poi": result,
        }));
    }
    std::fs::write(out.join("poi.csv"), csv_out)?;
    std::fs::write(
        out.join("radiomics.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "subjects": subject_reports }))
            .map_err(|e| CliError::Data(e.to_string()))?,
    )?;
    Ok(())
}

fn cmd_cohort_stats(records: &Path, out: &Path, common: &Common) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    ensure_writable(
        &[out.join("analysis.json"), out.join("analysis.txt"), out.join("boxplot.csv")],
        common.force,
    )?;
    let (parsed, excluded) = read_poi_csv(records)?;
    if common.verbose {
        eprintln!("{} complete records, {} excluded", parsed.len(), excluded.len());
    }
    let report = cohort_analysis(&parsed, excluded)?;
    std::fs::write(
        out.join("analysis.json"),
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?,
    )?;
    std::fs::write(out.join("analysis.txt"), report.to_text())?;
    std::fs::write(out.join("boxplot.csv"), report.boxplot_csv())?;
    Ok(())
}
