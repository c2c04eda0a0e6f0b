mod common;

use std::fs;

use common::*;
use fishtune::fisher::{select, SparsityMask, Strategy};
use fishtune::harness::{
    compare_strategies, load_checkpoint, plan_fixed_proportion, prepare, render_report, run_experiment,
    save_checkpoint, ArtifactRefs, ExperimentConfig, ExperimentReport, CHECKPOINT_FILE, CONFIG_FILE, MASK_FILE,
    METRICS_FILE, REPORT_FILE,
};
use fishtune::model::TaskConfig;
use fishtune::peft::Method;
use fishtune::train::{train, TrainConfig};

/// A config small enough to run many times: 2 epochs over 128 parity examples.
fn quick_config() -> ExperimentConfig {
    let setup = parity_setup(42);
    ExperimentConfig {
        model: setup.model,
        task: TaskConfig { size: 128, ..setup.task },
        peft: setup.peft,
        fisher_samples: 16,
        train: TrainConfig { epochs: 2, batch_size: 16, ..setup.train },
        ..ExperimentConfig::default()
    }
}

fn strip_wall_time(text: &str) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
    v["report"]["wall_time_seconds"] = serde_json::Value::Null;
    v
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = quick_config();
    let mut p = prepare(&cfg).unwrap();
    perturb_theta(&mut p.peft, 1, 0.1);
    let mask = select(&vec![0.0; p.peft.theta_len()], 20, Strategy::Random, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&path, &p.model, Some(&p.peft), Some(&mask), &ArtifactRefs::default(), "abc123").unwrap();

    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.config_hash, "abc123");
    assert_eq!(ck.mask.as_ref(), Some(&mask));
    let peft = ck.peft.unwrap();
    assert_eq!(peft.theta().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), p.peft.theta().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(ck.model.named_parameters(), p.model.named_parameters());
    assert!(ck.model.is_frozen());
    let batch = random_batch(&cfg.model, 4, 4, 3);
    let a = p.model.logits(Some(&p.peft), &batch).unwrap();
    let b = ck.model.logits(Some(&peft), &batch).unwrap();
    assert!(a.bitwise_eq(&b));
}

#[test]
fn truncated_checkpoint_names_missing_tensor() {
    let cfg = quick_config();
    let p = prepare(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&path, &p.model, Some(&p.peft), None, &ArtifactRefs::default(), "h").unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    let msg = load_checkpoint(&path).unwrap_err().to_string();
    assert!(msg.contains("peft.theta"), "{msg}");
}

#[test]
fn checkpoint_version_and_magic_are_checked() {
    let cfg = quick_config();
    let p = prepare(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&path, &p.model, Some(&p.peft), None, &ArtifactRefs::default(), "h").unwrap();
    let good = fs::read(&path).unwrap();

    let mut bumped = good.clone();
    bumped[8] = 99;
    fs::write(&path, &bumped).unwrap();
    assert!(load_checkpoint(&path).unwrap_err().to_string().contains("version"));

    let mut bad_magic = good;
    bad_magic[0] = b'X';
    fs::write(&path, &bad_magic).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn resumed_masked_run_keeps_dropped_coordinates() {
    let cfg = quick_config();
    let mut p = prepare(&cfg).unwrap();
    let init = p.peft.theta().to_vec();
    let mask = select(&vec![0.0; init.len()], 30, Strategy::Random, 2).unwrap();
    train(&mut p.model, &mut p.peft, Some(&mask), &p.task, &cfg.train).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&path, &p.model, Some(&p.peft), Some(&mask), &ArtifactRefs::default(), "h").unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let (mut model, mut peft, mask2) = (ck.model, ck.peft.unwrap(), ck.mask.unwrap());
    let base = model.base_snapshot();
    train(&mut model, &mut peft, Some(&mask2), &p.task, &cfg.train).unwrap();
    for (i, &kept) in mask2.bits().iter().enumerate() {
        if !kept {
            assert_eq!(peft.theta()[i].to_bits(), init[i].to_bits());
        }
    }
    assert_eq!(model.base_snapshot(), base);
}

#[test]
fn dense_full_budget_matches_unmasked_baseline() {
    let cfg = ExperimentConfig { strategy: Strategy::Dense, budget: Some(1.0), ..quick_config() };
    let report = run_experiment(&cfg).unwrap();
    let mut p = prepare(&cfg).unwrap();
    let baseline = train(&mut p.model, &mut p.peft, None, &p.task, &cfg.train).unwrap();
    assert!(report.same_metrics(&baseline));
}

#[test]
fn repeated_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let cfg = ExperimentConfig { output_dir: Some(out.clone()), ..quick_config() };
        run_experiment(&cfg).unwrap();
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in [METRICS_FILE, MASK_FILE, CHECKPOINT_FILE, "fisher.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let ra = strip_wall_time(&fs::read_to_string(a.join(REPORT_FILE)).unwrap());
    let rb = strip_wall_time(&fs::read_to_string(b.join(REPORT_FILE)).unwrap());
    let mut ra = ra;
    let mut rb = rb;
    ra["config"]["output_dir"] = serde_json::Value::Null;
    rb["config"]["output_dir"] = serde_json::Value::Null;
    assert_eq!(ra, rb);

    let metrics = fs::read_to_string(a.join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().count(), 2 * 3);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "split", "loss", "accuracy", "ratio1", "ratio2", "strategy", "seed"] {
            assert!(v.get(key).is_some(), "metrics line lacks {key}: {line}");
        }
    }
}

#[test]
fn embedded_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { output_dir: Some(dir.path().to_path_buf()), strategy: Strategy::Random, ..quick_config() };
    let first = run_experiment(&cfg).unwrap();
    let stored: ExperimentReport = serde_json::from_str(&fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap()).unwrap();
    let reloaded = ExperimentConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(reloaded, stored.config);
    let again = run_experiment(&ExperimentConfig { output_dir: None, ..stored.config }).unwrap();
    assert!(first.same_metrics(&again));
    assert_eq!(stored.config_hash, cfg.hash());
}

#[test]
fn stage_errors_name_the_stage() {
    let mut cfg = quick_config();
    cfg.task.seq_len = cfg.model.max_seq_len + 1;
    let msg = run_experiment(&cfg).unwrap_err().to_string();
    assert!(msg.contains("validate"), "{msg}");
}

#[test]
fn single_cell_comparison_equals_single_run() {
    let cfg = ExperimentConfig { strategy: Strategy::Dense, budget: Some(1.0), ..quick_config() };
    let table = compare_strategies(&cfg, &[Strategy::Dense], &[1.0], &[42]).unwrap();
    assert_eq!(table.runs.len(), 1);
    let single = run_experiment(&cfg).unwrap();
    assert!(table.runs[0].report.as_ref().unwrap().same_metrics(&single));
    assert_eq!(table.mean_accuracy(Strategy::Dense, 1.0), Some(single.final_eval_accuracy));
}

#[test]
fn full_budget_makes_strategies_identical() {
    let strategies = [Strategy::Fish, Strategy::Random, Strategy::Reverse];
    let table = compare_strategies(&quick_config(), &strategies, &[1.0], &[42]).unwrap();
    let reports: Vec<_> = table.runs.iter().map(|r| r.report.clone().unwrap()).collect();
    assert!(reports.windows(2).all(|w| w[0].same_metrics(&w[1])));
}

#[test]
fn sweep_table_has_one_cell_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { output_dir: Some(dir.path().to_path_buf()), ..quick_config() };
    let strategies = [Strategy::Fish, Strategy::Random, Strategy::Reverse];
    let budgets = [0.01, 0.05, 0.25, 0.5];
    let table = compare_strategies(&cfg, &strategies, &budgets, &[42]).unwrap();
    assert_eq!(table.runs.len(), 12);
    assert!(table.runs.iter().all(|r| r.error.is_none()));
    let tsv = fs::read_to_string(dir.path().join("comparison.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = tsv.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.len() == 5));
    for row in &rows[1..] {
        for cell in &row[1..] {
            let acc: f64 = cell.parse().unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }

    let rendered = render_report(&[dir.path().to_path_buf()]).unwrap();
    assert!(rendered.contains("fish") && rendered.contains("0.01"));
}

#[test]
fn failed_cells_render_as_missing() {
    let mut table = compare_strategies(&quick_config(), &[Strategy::Fish, Strategy::Random], &[0.1], &[42]).unwrap();
    assert!(table.runs.iter().all(|r| r.report.is_some()));
    table.runs[0].report = None;
    table.runs[0].error = Some("fisher: non-finite gradient".into());
    assert_eq!(table.mean_accuracy(Strategy::Fish, 0.1), None);
    assert!(table.mean_accuracy(Strategy::Random, 0.1).is_some());
    let tsv = table.to_tsv();
    assert!(tsv.lines().nth(1).unwrap().contains("NA"), "{tsv}");
}

#[test]
fn fixed_proportion_matches_ratio1_within_one_parameter() {
    let mut cfg = quick_config();
    cfg.model.num_layers = 3;
    let plan = plan_fixed_proportion(&cfg, 1, 2).unwrap();
    assert_eq!(plan.masked_layers, 3);
    assert!(plan.residual.abs() <= 0.5);
    let diff_params = (plan.masked_ratio1 - plan.original_ratio1).abs() * plan.masked_total as f64;
    assert!(diff_params <= 1.0, "{diff_params}");
    assert!(plan_fixed_proportion(&cfg, 2, 2).is_err());
}

#[test]
fn render_report_reads_run_directories() {
    let dir = tempfile::tempdir().unwrap();
    for (name, method) in [("lora", Method::Lora), ("ia3", Method::Ia3)] {
        let mut cfg = quick_config();
        cfg.peft.method = method;
        cfg.output_dir = Some(dir.path().join(name));
        run_experiment(&cfg).unwrap();
    }
    let text = render_report(&[dir.path().to_path_buf()]).unwrap();
    assert!(text.contains("\tlora\t") && text.contains("\tia3\t"), "{text}");
    assert!(text.contains("eval loss by epoch"));
    assert_eq!(text, render_report(&[dir.path().to_path_buf()]).unwrap());
    assert!(render_report(&[dir.path().join("missing")]).unwrap_err().is_validation());
}

#[test]
fn dense_mask_file_matches_theta_length() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        strategy: Strategy::Dense,
        output_dir: Some(dir.path().to_path_buf()),
        ..quick_config()
    };
    let report = run_experiment(&cfg).unwrap();
    let mask = fishtune::fisher::io::load_mask(&dir.path().join(MASK_FILE)).unwrap();
    assert_eq!(mask.bits(), SparsityMask::dense(report.theta_len).unwrap().bits());
    assert_eq!(mask.k(), report.theta_len);
    assert!(!dir.path().join("fisher.bin").exists());
}
