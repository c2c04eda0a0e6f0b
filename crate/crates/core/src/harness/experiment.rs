use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::fisher::{self, estimate_fisher, select, FisherEstimate, SparsityMask, Strategy};
use crate::model::{build_model, generate_task, Task, TransformerModel};
use crate::peft::{attach, layout, PeftModule};
use crate::train::{train, TrainReport};
use crate::util::atomic_write;

use super::checkpoint::{save_checkpoint, ArtifactRefs};
use super::config::ExperimentConfig;

pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const MASK_FILE: &str = "mask.bin";
pub const FISHER_FILE: &str = "fisher.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const COMPARISON_JSON: &str = "comparison.json";
pub const COMPARISON_TSV: &str = "comparison.tsv";

/// A freshly built model with its adapter attached, plus the task data.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: TransformerModel,
    pub peft: PeftModule,
    pub task: Task,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate().stage("validate")?;
    let mut model = build_model(&cfg.model).stage("build_model")?;
    let task = generate_task(&cfg.task).stage("generate_task")?;
    let peft = attach(&mut model, &cfg.peft).stage("attach")?;
    Ok(Prepared { model, peft, task })
}

/// Fisher scores on the training split, when the strategy needs them.
pub fn fisher_for(cfg: &ExperimentConfig, p: &Prepared) -> Result<Option<FisherEstimate>> {
    if !cfg.strategy.uses_scores() {
        return Ok(None);
    }
    let n = cfg.fisher_samples.min(p.task.train.len());
    let mut f = estimate_fisher(&p.model, &p.peft, &p.task.train.examples, n).stage("fisher")?;
    f.source_config_hash = cfg.hash();
    Ok(Some(f))
}

/// Number of kept coordinates the config asks for.
pub fn resolve_k(cfg: &ExperimentConfig, theta_len: usize) -> Result<usize> {
    if cfg.strategy == Strategy::Dense {
        return Ok(theta_len);
    }
    match (cfg.k, cfg.budget) {
        (Some(k), _) if k > theta_len => Err(Error::config(format!("k = {k} exceeds θ̃ length {theta_len}"))),
        (Some(k), _) => Ok(k),
        (None, Some(b)) => fisher::k_for_ratio(theta_len, b),
        (None, None) => Err(Error::config("either budget or k must be set")),
    }
}

pub fn mask_for(cfg: &ExperimentConfig, peft: &PeftModule, scores: Option<&FisherEstimate>) -> Result<SparsityMask> {
    let len = peft.theta_len();
    let k = resolve_k(cfg, len)?;
    let zeros;
    let scores = match (cfg.strategy.uses_scores(), scores) {
        (true, Some(f)) => &f.scores[..],
        (true, None) => return Err(Error::contract(format!("strategy {} needs Fisher scores", cfg.strategy))),
        (false, _) => {
            zeros = vec![0.0; len];
            &zeros[..]
        }
    };
    select(scores, k, cfg.strategy, cfg.peft.seed)
}

/// A report file: the resolved config plus the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub report: TrainReport,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub ratio1: f64,
    pub ratio2: f64,
    pub strategy: Option<Strategy>,
    pub seed: u64,
}

pub fn metrics_lines(report: &TrainReport) -> String {
    let mut out = String::new();
    for r in &report.records {
        let base = MetricsRecord {
            epoch: r.epoch,
            split: "train".into(),
            loss: r.train_loss,
            accuracy: None,
            ratio1: report.ratio1,
            ratio2: report.ratio2,
            strategy: report.strategy,
            seed: report.seed,
        };
        let eval = MetricsRecord { split: "eval".into(), loss: r.eval_loss, accuracy: Some(r.eval_accuracy), ..base.clone() };
        for rec in [base, eval] {
            out.push_str(&serde_json::to_string(&rec).expect("metrics serialize"));
            out.push('\n');
        }
    }
    out
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// Trains an already prepared run with a chosen mask.
pub fn train_prepared(cfg: &ExperimentConfig, mut p: Prepared, mask: &SparsityMask) -> Result<(TrainReport, Prepared)> {
    let mut report = train(&mut p.model, &mut p.peft, Some(mask), &p.task, &cfg.train).stage("train")?;
    report.config_hash = cfg.hash();
    Ok((report, p))
}

/// Full pipeline: build, attach, score, select, train, then persist when
/// `output_dir` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let prepared = prepare(cfg)?;
    let fisher = fisher_for(cfg, &prepared)?;
    run_with_scores(cfg, prepared, fisher.as_ref())
}

pub fn run_with_scores(cfg: &ExperimentConfig, prepared: Prepared, fisher: Option<&FisherEstimate>) -> Result<TrainReport> {
    let mask = mask_for(cfg, &prepared.peft, fisher).stage("select")?;
    let (report, trained) = train_prepared(cfg, prepared, &mask)?;
    if let Some(dir) = &cfg.output_dir {
        persist_run(dir, cfg, &report, &trained, &mask, fisher).stage("persist")?;
    }
    Ok(report)
}

fn persist_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    report: &TrainReport,
    trained: &Prepared,
    mask: &SparsityMask,
    fisher: Option<&FisherEstimate>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    let hash = cfg.hash();
    write_json(&dir.join(REPORT_FILE), &ExperimentReport { config: cfg.clone(), config_hash: hash.clone(), report: report.clone() })?;
    atomic_write(&dir.join(METRICS_FILE), metrics_lines(report).as_bytes())?;
    let mask_path = dir.join(MASK_FILE);
    fisher::io::save_mask(&mask_path, mask)?;
    let fisher_path = match fisher {
        Some(f) => {
            let p = dir.join(FISHER_FILE);
            fisher::io::save_scores(&p, f)?;
            Some(p)
        }
        None => None,
    };
    let refs = ArtifactRefs { mask: Some(mask_path), fisher: fisher_path };
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &trained.model, Some(&trained.peft), None, &refs, &hash)
}

/// One run of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub strategy: Strategy,
    pub budget: f64,
    pub seed: u64,
    pub report: Option<TrainReport>,
    pub error: Option<String>,
}

/// Strategy × budget grid of seed-averaged final eval accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub config_hash: String,
    pub strategies: Vec<Strategy>,
    pub budgets: Vec<f64>,
    pub seeds: Vec<u64>,
    pub runs: Vec<SweepRun>,
}

impl ComparisonTable {
    pub fn runs_for(&self, strategy: Strategy, budget: f64) -> impl Iterator<Item = &SweepRun> {
        self.runs.iter().filter(move |r| r.strategy == strategy && r.budget == budget)
    }

    /// Mean final accuracy over the seeds that completed, if any did.
    pub fn mean_accuracy(&self, strategy: Strategy, budget: f64) -> Option<f64> {
        let accs: Vec<f64> = self
            .runs_for(strategy, budget)
            .filter_map(|r| r.report.as_ref())
            .map(|r| r.final_eval_accuracy)
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("strategy");
        for b in &self.budgets {
            out.push_str(&format!("\t{b}"));
        }
        out.push('\n');
        for &s in &self.strategies {
            out.push_str(s.name());
            for &b in &self.budgets {
                match self.mean_accuracy(s, b) {
                    Some(a) => out.push_str(&format!("\t{a:.6}")),
                    None => out.push_str("\tNA"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs every strategy × budget × seed combination.
///
/// Fisher scores are computed once per seed and shared by all cells of that
/// seed. A failing cell is recorded and the sweep continues.
pub fn compare_strategies(
    cfg: &ExperimentConfig,
    strategies: &[Strategy],
    budgets: &[f64],
    seeds: &[u64],
) -> Result<ComparisonTable> {
    if strategies.is_empty() || budgets.is_empty() || seeds.is_empty() {
        return Err(Error::config("comparison needs at least one strategy, budget and seed"));
    }
    for &b in budgets {
        fisher::k_for_ratio(1, b)?;
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        let base = cfg.clone().with_seed(seed);
        let prepared = prepare(&ExperimentConfig { strategy: Strategy::Fish, k: None, budget: Some(1.0), ..base.clone() })?;
        let needs_scores = strategies.iter().any(|s| s.uses_scores());
        let scoring = ExperimentConfig { strategy: Strategy::Fish, ..base.clone() };
        let fisher = if needs_scores { Some(fisher_for(&scoring, &prepared)) } else { None };
        let cells: Vec<(Strategy, f64)> =
            strategies.iter().flat_map(|&s| budgets.iter().map(move |&b| (s, b))).collect();
        let results: Vec<SweepRun> = cells
            .par_iter()
            .map(|&(strategy, budget)| {
                let cell = ExperimentConfig { strategy, budget: Some(budget), k: None, output_dir: None, ..base.clone() };
                let scores = match &fisher {
                    Some(Ok(f)) => f.as_ref(),
                    Some(Err(e)) if strategy.uses_scores() => {
                        return SweepRun { strategy, budget, seed, report: None, error: Some(e.to_string()) }
                    }
                    _ => None,
                };
                match run_with_scores(&cell, prepared.clone(), scores) {
                    Ok(r) => SweepRun { strategy, budget, seed, report: Some(r), error: None },
                    Err(e) => SweepRun { strategy, budget, seed, report: None, error: Some(e.to_string()) },
                }
            })
            .collect();
        runs.extend(results);
    }
    let table = ComparisonTable {
        config_hash: cfg.hash(),
        strategies: strategies.to_vec(),
        budgets: budgets.to_vec(),
        seeds: seeds.to_vec(),
        runs,
    };
    if let Some(dir) = &cfg.output_dir {
        write_comparison(dir, &table).stage("persist")?;
    }
    Ok(table)
}

pub fn write_comparison(dir: &Path, table: &ComparisonTable) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(COMPARISON_JSON), table)?;
    atomic_write(&dir.join(COMPARISON_TSV), table.to_tsv().as_bytes())
}

/// Sizes for comparing an adapter on `original_layers` top layers, fully
/// trained, against a masked adapter on `original_layers + extra_layers`
/// whose kept count matches the original's share of all parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionPlan {
    pub original_layers: usize,
    pub masked_layers: usize,
    pub original_trainable: usize,
    pub original_total: usize,
    pub masked_theta_len: usize,
    pub masked_total: usize,
    pub masked_k: usize,
    pub original_ratio1: f64,
    pub masked_ratio1: f64,
    /// `masked_k` minus the exact (real-valued) matching count.
    pub residual: f64,
}

pub fn plan_fixed_proportion(cfg: &ExperimentConfig, original_layers: usize, extra_layers: usize) -> Result<ProportionPlan> {
    let masked_layers = original_layers + extra_layers;
    if original_layers == 0 || masked_layers > cfg.model.num_layers {
        return Err(Error::config(format!(
            "layer counts {original_layers} + {extra_layers} do not fit a {}-layer model",
            cfg.model.num_layers
        )));
    }
    let sizes = |layers: usize| -> Result<(usize, usize)> {
        let peft = cfg.peft.clone().with_top_layers(layers);
        peft.validate(&cfg.model)?;
        let (theta, aux) = layout(&cfg.model, &peft)?;
        let theta_len: usize = theta.iter().map(|s| s.len()).sum();
        let aux_len: usize = aux.iter().map(|s| s.len()).sum();
        Ok((theta_len, cfg.model.parameter_count() + theta_len + aux_len))
    };
    let (orig_theta, orig_total) = sizes(original_layers)?;
    let (masked_theta, masked_total) = sizes(masked_layers)?;
    let exact = orig_theta as f64 * masked_total as f64 / orig_total as f64;
    let masked_k = (exact.round() as usize).clamp(1, masked_theta);
    Ok(ProportionPlan {
        original_layers,
        masked_layers,
        original_trainable: orig_theta,
        original_total: orig_total,
        masked_theta_len: masked_theta,
        masked_total,
        masked_k,
        original_ratio1: orig_theta as f64 / orig_total as f64,
        masked_ratio1: masked_k as f64 / masked_total as f64,
        residual: masked_k as f64 - exact,
    })
}

/// Runs both sides of a fixed-proportion pair: the dense original and the
/// masked variant using `cfg.strategy`.
pub fn run_fixed_proportion(
    cfg: &ExperimentConfig,
    original_layers: usize,
    extra_layers: usize,
) -> Result<(ProportionPlan, TrainReport, TrainReport)> {
    let plan = plan_fixed_proportion(cfg, original_layers, extra_layers)?;
    let sub = |name: &str| cfg.output_dir.as_ref().map(|d| d.join(name));
    let original = ExperimentConfig {
        peft: cfg.peft.clone().with_top_layers(original_layers),
        strategy: Strategy::Dense,
        budget: Some(1.0),
        k: None,
        output_dir: sub("original"),
        ..cfg.clone()
    };
    let masked = ExperimentConfig {
        peft: cfg.peft.clone().with_top_layers(plan.masked_layers),
        k: Some(plan.masked_k),
        output_dir: sub("masked"),
        ..cfg.clone()
    };
    let a = run_experiment(&original)?;
    let b = run_experiment(&masked)?;
    if let Some(dir) = &cfg.output_dir {
        write_json(&dir.join("pair.json"), &plan)?;
    }
    Ok((plan, a, b))
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else if matches!(path.file_name().and_then(|n| n.to_str()), Some(REPORT_FILE | COMPARISON_JSON)) {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Renders stored report and comparison files as text tables.
pub fn render_report(paths: &[PathBuf]) -> Result<String> {
    let mut files = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Error::config(format!("{} does not exist", p.display())));
        }
        collect_files(p, &mut files)?;
    }
    if files.is_empty() {
        return Err(Error::config("no report.json or comparison.json files found"));
    }
    let mut runs = String::from("run\tmethod\tstrategy\tk\tratio1\tratio2\tepochs\teval_loss\teval_accuracy\n");
    let mut curves = String::new();
    let mut tables = String::new();
    for f in &files {
        let text = fs::read_to_string(f)?;
        if f.file_name().and_then(|n| n.to_str()) == Some(COMPARISON_JSON) {
            let t: ComparisonTable = serde_json::from_str(&text)
                .map_err(|e| Error::format(format!("{}: {e}", f.display())))?;
            tables.push_str(&format!("# {} (seeds {:?})\n{}", f.display(), t.seeds, t.to_tsv()));
            continue;
        }
        let r: ExperimentReport =
            serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", f.display())))?;
        let rep = &r.report;
        let name = f.parent().unwrap_or(Path::new(".")).display();
        runs.push_str(&format!(
            "{name}\t{}\t{}\t{}\t{:.6e}\t{:.6}\t{}\t{:.6}\t{:.6}\n",
            r.config.peft.method,
            rep.strategy.map_or("none", |s| s.name()),
            rep.k,
            rep.ratio1,
            rep.ratio2,
            rep.records.len() - 1,
            rep.final_eval_loss,
            rep.final_eval_accuracy,
        ));
        let losses: Vec<String> = rep.records.iter().map(|e| format!("{:.4}", e.eval_loss)).collect();
        curves.push_str(&format!("{name}\t{}\n", losses.join(" ")));
    }
    let mut out = runs;
    if !curves.is_empty() {
        out.push_str("\neval loss by epoch\n");
        out.push_str(&curves);
    }
    if !tables.is_empty() {
        out.push('\n');
        out.push_str(&tables);
    }
    Ok(out)
}
