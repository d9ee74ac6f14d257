//! End-to-end exercise of the command-line surface: every subcommand, the
//! documented exit codes, output file formats, and rerun determinism.

use std::fs;
use std::path::Path;

use smedseg::cli::{run_from, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};

fn cli(args: &[&str]) -> i32 {
    run_from(std::iter::once("smedseg").chain(args.iter().copied()))
}

fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn make_phantoms(dir: &Path, count: usize) {
    assert_eq!(
        cli(&[
            "make-phantom",
            "--out",
            &path_str(dir),
            "--count",
            &count.to_string(),
            "--shape",
            "8,64,64",
            "--seed",
            "9",
        ]),
        EXIT_OK
    );
}

fn micro_experiment_json(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "model": {
            "backbone": "efficientnet_style",
            "use_esc": true,
            "use_bilinear_upsample": true,
            "patch_size": 16,
            "bifpn_channels": 8,
            "bifpn_levels": 1,
            "bifpn_repeats": 1,
            "stage_widths": [8],
            "seed": 4
        },
        "train": {
            "batch_size": 8,
            "patch_size": 16,
            "optimizer": "adam_w",
            "initial_lr": 1e-3,
            "max_epochs": 2,
            "seed": 4
        }
    });
    let path = dir.join("experiment.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path_str(&path)
}

#[test]
fn make_phantom_then_overwrite_protection() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("phantoms");
    make_phantoms(&out, 2);
    assert!(out.join("phantom_000.nii.gz").exists());
    assert!(out.join("phantom_000_label.nii.gz").exists());
    assert!(out.join("phantom_000_lobes.nii.gz").exists());
    assert!(out.join("run.log").exists());
    // Same invocation without --force refuses to clobber.
    assert_eq!(
        cli(&["make-phantom", "--out", &path_str(&out), "--count", "2", "--shape", "8,64,64"]),
        EXIT_USAGE
    );
    // And succeeds with it.
    assert_eq!(
        cli(&[
            "make-phantom",
            "--out",
            &path_str(&out),
            "--count",
            "2",
            "--shape",
            "8,64,64",
            "--force",
        ]),
        EXIT_OK
    );
}

#[test]
fn train_predict_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_phantoms(&data, 3);
    let config = micro_experiment_json(dir.path());
    let run_dir = dir.path().join("run");

    assert_eq!(
        cli(&["train", "--config", &config, "--data", &path_str(&data), "--out", &path_str(&run_dir)]),
        EXIT_OK
    );
    assert!(run_dir.join("best.ckpt").exists());
    assert!(run_dir.join("split.json").exists());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("report.json")).unwrap()).unwrap();
    assert!(report["best_epoch"].as_u64().unwrap() >= 1);
    // Timing lives in the sidecar log, not the report.
    assert!(report.get("wall_seconds").is_none());
    assert!(fs::read_to_string(run_dir.join("run.log")).unwrap().contains("wall_seconds"));

    // Deterministic rerun: byte-identical report and checkpoint.
    let report_a = fs::read(run_dir.join("report.json")).unwrap();
    let ckpt_a = fs::read(run_dir.join("best.ckpt")).unwrap();
    assert_eq!(
        cli(&[
            "train",
            "--config",
            &config,
            "--data",
            &path_str(&data),
            "--out",
            &path_str(&run_dir),
            "--force",
        ]),
        EXIT_OK
    );
    assert_eq!(report_a, fs::read(run_dir.join("report.json")).unwrap());
    assert_eq!(ckpt_a, fs::read(run_dir.join("best.ckpt")).unwrap());

    // Predict onto one of the training volumes.
    let pred_dir = dir.path().join("pred");
    fs::create_dir_all(&pred_dir).unwrap();
    let out_nii = pred_dir.join("phantom_000.nii.gz");
    assert_eq!(
        cli(&[
            "predict",
            "--checkpoint",
            &path_str(&run_dir.join("best.ckpt")),
            "--input",
            &path_str(&data.join("phantom_000.nii.gz")),
            "--out",
            &path_str(&out_nii),
        ]),
        EXIT_OK
    );
    let labels = smedseg::data::io::load_labels(&out_nii, None).unwrap();
    assert!(labels.labels.iter().all(|&v| v <= 2));
    // Spacing carried over from the input.
    let written = smedseg::data::nifti::read(&out_nii).unwrap();
    assert!((written.spacing[0] - 2.0).abs() < 1e-5);
    assert!((written.spacing[1] - 1.0).abs() < 1e-5);

    // Evaluate predictions against ground truth; the gt directory uses the
    // same stems. Copy the remaining gt labels as "predictions" to get a
    // known-perfect pair plus one missing prediction.
    let gt_dir = dir.path().join("gt");
    fs::create_dir_all(&gt_dir).unwrap();
    for i in 0..3 {
        fs::copy(
            data.join(format!("phantom_00{i}_label.nii.gz")),
            gt_dir.join(format!("phantom_00{i}.nii.gz")),
        )
        .unwrap();
    }
    // Perfect prediction for subjects 1; subject 2 missing.
    fs::copy(gt_dir.join("phantom_001.nii.gz"), pred_dir.join("phantom_001.nii.gz")).unwrap();
    let eval_dir = dir.path().join("eval");
    assert_eq!(
        cli(&[
            "evaluate",
            "--pred",
            &path_str(&pred_dir),
            "--gt",
            &path_str(&gt_dir),
            "--out",
            &path_str(&eval_dir),
        ]),
        EXIT_OK
    );
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["missing"][0], "phantom_002.nii.gz");
    assert_eq!(summary["lung"]["n"], 2);
    let lung_csv = fs::read_to_string(eval_dir.join("dice_lung.csv")).unwrap();
    // The copied ground truth evaluates at dice exactly 1.
    assert!(lung_csv.lines().any(|l| l == "phantom_001,1"), "csv was:\n{lung_csv}");
}

#[test]
fn missing_data_directory_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_experiment_json(dir.path());
    let code = cli(&[
        "train",
        "--config",
        &config,
        "--data",
        &path_str(&dir.path().join("no_such_dir")),
        "--out",
        &path_str(&dir.path().join("out")),
    ]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn corrupted_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_phantoms(&data, 1);
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"garbage").unwrap();
    let code = cli(&[
        "predict",
        "--checkpoint",
        &path_str(&bad),
        "--input",
        &path_str(&data.join("phantom_000.nii.gz")),
        "--out",
        &path_str(&dir.path().join("out.nii.gz")),
    ]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn divergence_maps_to_the_numerical_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_phantoms(&data, 3);
    // An absurd learning rate drives parameters to overflow and the loss to
    // NaN within the first epochs.
    let cfg = serde_json::json!({
        "model": {
            "backbone": "efficientnet_style",
            "use_esc": false,
            "use_bilinear_upsample": true,
            "patch_size": 16,
            "bifpn_channels": 8,
            "bifpn_levels": 1,
            "bifpn_repeats": 1,
            "stage_widths": [8],
            "seed": 4
        },
        "train": {
            "batch_size": 8,
            "patch_size": 16,
            "initial_lr": 1e307,
            "max_epochs": 4,
            "seed": 4
        }
    });
    let config = dir.path().join("diverge.json");
    fs::write(&config, serde_json::to_string(&cfg).unwrap()).unwrap();
    let code = cli(&[
        "train",
        "--config",
        &path_str(&config),
        "--data",
        &path_str(&data),
        "--out",
        &path_str(&dir.path().join("out")),
    ]);
    assert_eq!(code, EXIT_NUMERIC);
}

#[test]
fn ablate_toy_matrix_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_phantoms(&data, 3);
    let cfg = serde_json::json!({
        "base": {
            "model": {
                "backbone": "efficientnet_style",
                "use_esc": false,
                "use_bilinear_upsample": false,
                "patch_size": 16,
                "bifpn_channels": 8,
                "bifpn_levels": 1,
                "bifpn_repeats": 1,
                "stage_widths": [8],
                "seed": 6
            },
            "train": {
                "batch_size": 8,
                "patch_size": 16,
                "initial_lr": 1e-3,
                "max_epochs": 1,
                "seed": 6
            },
            "ips_patch_size": 32,
            "ibs_batch_size": 12,
            "adamw_lr": 1e-3,
            "eval_class": "lung"
        },
        "rows": [[], ["ESC"]]
    });
    let config = dir.path().join("matrix.json");
    fs::write(&config, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let out_a = dir.path().join("abl_a");
    let out_b = dir.path().join("abl_b");
    for out in [&out_a, &out_b] {
        assert_eq!(
            cli(&[
                "ablate",
                "--config",
                &path_str(&config),
                "--data",
                &path_str(&data),
                "--out",
                &path_str(out),
            ]),
            EXIT_OK
        );
    }
    let csv_a = fs::read_to_string(out_a.join("ablation.csv")).unwrap();
    let csv_b = fs::read_to_string(out_b.join("ablation.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    assert!(csv_a.starts_with("row,flags,dice_mean,dice_std,p_vs_baseline\n"));
    assert_eq!(csv_a.lines().count(), 3);
    assert!(out_a.join("ablation.txt").exists());
    assert!(out_a.join("ablation.json").exists());
}

#[test]
fn radiomics_and_cohort_stats_flow() {
    let dir = tempfile::tempdir().unwrap();
    let phantom_dir = dir.path().join("phantoms");
    make_phantoms(&phantom_dir, 2);

    // Rearrange phantom outputs into the radiomics mask layout:
    // findings = label 2 mask, lung = labels >= 1, lobes = coded volume.
    let masks = dir.path().join("masks");
    fs::create_dir_all(&masks).unwrap();
    for i in 0..2 {
        let stem = format!("phantom_00{i}");
        let labels = smedseg::data::io::load_labels(
            &phantom_dir.join(format!("{stem}_label.nii.gz")),
            None,
        )
        .unwrap();
        let findings = labels.labels.map(|&v| u8::from(v == 2));
        let lung = labels.labels.map(|&v| u8::from(v >= 1));
        let spacing = [2.0, 1.0, 1.0];
        smedseg::data::io::save_coded(&masks.join(format!("{stem}_findings.nii.gz")), &findings, spacing).unwrap();
        smedseg::data::io::save_coded(&masks.join(format!("{stem}_lung.nii.gz")), &lung, spacing).unwrap();
        fs::copy(
            phantom_dir.join(format!("{stem}_lobes.nii.gz")),
            masks.join(format!("{stem}_lobes.nii.gz")),
        )
        .unwrap();
    }
    // Covariates for subject 0 only; subject 1 will be excluded downstream.
    fs::write(
        dir.path().join("covariates.csv"),
        "subject_id,age,sex,days_dx_to_ct,vaccinated\nphantom_000,61,1,120,1\n",
    )
    .unwrap();

    let radio_out = dir.path().join("radiomics");
    assert_eq!(
        cli(&[
            "radiomics",
            "--masks",
            &path_str(&masks),
            "--covariates",
            &path_str(&dir.path().join("covariates.csv")),
            "--out",
            &path_str(&radio_out),
        ]),
        EXIT_OK
    );
    let poi_csv = fs::read_to_string(radio_out.join("poi.csv")).unwrap();
    assert!(poi_csv.starts_with(
        "subject_id,poi_total,poi_lul,poi_lll,poi_rul,poi_rml,poi_rll,age,sex,days_dx_to_ct,vaccinated"
    ));

    // Cross-check one subject's total POI against direct voxel counting.
    let labels = smedseg::data::io::load_labels(
        &phantom_dir.join("phantom_000_label.nii.gz"),
        None,
    )
    .unwrap();
    let findings_count = labels.labels.iter().filter(|&&v| v == 2).count();
    let lung_count = labels.labels.iter().filter(|&&v| v >= 1).count();
    let expected = 100.0 * findings_count as f64 / lung_count as f64;
    let row = poi_csv.lines().nth(1).unwrap();
    let got: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert!((got - expected).abs() < 1e-9, "POI {got} vs counted {expected}");
    // Subject 1 has empty covariate cells.
    let row1 = poi_csv.lines().nth(2).unwrap();
    assert!(row1.ends_with(",,,"), "row was {row1}");

    // Build a synthetic cohort around the measured rows: identical POI
    // distributions in both groups.
    let mut cohort = String::from(
        "subject_id,poi_total,poi_lul,poi_lll,poi_rul,poi_rml,poi_rll,age,sex,days_dx_to_ct,vaccinated\n",
    );
    for i in 0..12 {
        let poi = 4.0 + f64::from(i / 2);
        cohort.push_str(&format!(
            "s{i:02},{poi},1,2,0.5,1,3,{age},{sex},{days},{vax}\n",
            age = 45 + (i % 7),
            sex = (i / 3) % 2,
            days = 40 + ((i * i * 3) % 90),
            vax = i % 2,
        ));
    }
    // One record with a missing covariate: excluded, not fatal.
    cohort.push_str("s99,5.0,1,2,0.5,1,3,,0,50,1\n");
    let records = dir.path().join("records.csv");
    fs::write(&records, cohort).unwrap();
    let stats_out = dir.path().join("cohort");
    assert_eq!(
        cli(&["cohort-stats", "--records", &path_str(&records), "--out", &path_str(&stats_out)]),
        EXIT_OK
    );
    let analysis: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(stats_out.join("analysis.json")).unwrap())
            .unwrap();
    assert_eq!(analysis["n_records"], 12);
    assert_eq!(analysis["excluded"][0][0], "s99");
    let p = analysis["t_p_value"].as_f64().unwrap();
    assert!(p > 0.9, "identical groups: p = {p}");
    assert!(stats_out.join("boxplot.csv").exists());
    assert!(fs::read_to_string(stats_out.join("analysis.txt"))
        .unwrap()
        .contains("regression of total POI"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(cli(&["no-such-subcommand"]), EXIT_USAGE);
    assert_eq!(cli(&["train"]), EXIT_USAGE); // missing required flags
}

#[test]
fn shipped_configs_parse() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");

    // The full matrix config expands to the twelve documented rows.
    let text = fs::read_to_string(configs.join("ablation_full.json")).unwrap();
    let matrix: smedseg::cli::AblationMatrixConfig = serde_json::from_str(&text).unwrap();
    assert!(matrix.use_documented_rows);
    let rows = smedseg::train::table1_flag_rows();
    assert_eq!(rows.len(), 12);
    for (i, flags) in rows.iter().enumerate() {
        let row = matrix.base.resolve(i, flags);
        row.model.validate().unwrap();
        row.train.validate().unwrap();
    }
    // The proposed row carries the documented magnitudes.
    let last = matrix.base.resolve(11, rows.last().unwrap());
    assert_eq!(last.model.patch_size, 256);
    assert_eq!(last.train.batch_size, 60);
    assert_eq!(last.train.initial_lr, 1e-4);
    assert_eq!(last.train.weight_decay, 1e-5);
    assert_eq!(last.train.lr_decay_gamma, 0.985);

    let text = fs::read_to_string(configs.join("ablation_toy.json")).unwrap();
    let toy: smedseg::cli::AblationMatrixConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(toy.rows.len(), 3);

    let text = fs::read_to_string(configs.join("experiment_micro.json")).unwrap();
    let exp: smedseg::cli::ExperimentConfig = serde_json::from_str(&text).unwrap();
    exp.model.validate().unwrap();
    exp.train.validate().unwrap();

    let text = fs::read_to_string(configs.join("experiment_full.toml")).unwrap();
    let exp: smedseg::cli::ExperimentConfig = toml::from_str(&text).unwrap();
    let flags = exp.flags.clone().unwrap();
    assert_eq!(flags.len(), 7);
    assert!(!flags.contains(&smedseg::train::AblationFlag::Cnf));
}
