use std::fs;
use std::path::{Path, PathBuf};

use fishtune::fisher::{self, estimate_fisher, Strategy};
use fishtune::harness::{
    compare_strategies, fisher_for, load_checkpoint, mask_for, prepare, render_report, run_experiment,
    run_fixed_proportion, ExperimentConfig, FISHER_FILE, MASK_FILE,
};
use fishtune::model::generate_task;
use fishtune::train::evaluate;
use fishtune::util::atomic_write;
use fishtune::{Error, Result};

use crate::args::{Cli, Command, CompareArgs, EvalArgs, MaskArgs, ReportArgs};

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => gen_data(&c.resolve()?),
        Command::Fisher(c) => fisher_cmd(&c.resolve()?),
        Command::Mask(a) => mask_cmd(&a),
        Command::Train(c) => train_cmd(&c.resolve()?),
        Command::Eval(a) => eval_cmd(&a),
        Command::Compare(a) => compare_cmd(&a),
        Command::Report(a) => report_cmd(&a),
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.output_dir
        .as_deref()
        .ok_or_else(|| Error::config("this command needs --out (or output_dir in the config)"))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let task = generate_task(&cfg.task)?;
    fs::create_dir_all(dir)?;
    write_json(&dir.join("train.json"), &serde_json::to_value(&task.train)?)?;
    write_json(&dir.join("eval.json"), &serde_json::to_value(&task.eval)?)?;
    println!("wrote {} train and {} eval examples to {}", task.train.len(), task.eval.len(), dir.display());
    Ok(())
}

fn fisher_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let p = prepare(cfg)?;
    let n = cfg.fisher_samples.min(p.task.train.len());
    let mut scores = estimate_fisher(&p.model, &p.peft, &p.task.train.examples, n)?;
    scores.source_config_hash = cfg.hash();
    fisher::io::save_scores(&dir.join(FISHER_FILE), &scores)?;
    atomic_write(&dir.join("fisher.txt"), fisher::io::export_text(Some(&scores), None)?.as_bytes())?;
    println!("wrote Fisher scores for {} coordinates from {n} samples to {}", scores.len(), dir.display());
    Ok(())
}

fn mask_cmd(a: &MaskArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let dir = out_dir(&cfg)?;
    let p = prepare(&cfg)?;
    let scores = match (&a.scores, cfg.strategy.uses_scores()) {
        (Some(path), true) => Some(fisher::io::load_scores(path)?),
        (None, true) => fisher_for(&cfg, &p)?,
        (_, false) => None,
    };
    let mask = mask_for(&cfg, &p.peft, scores.as_ref())?;
    fisher::io::save_mask(&dir.join(MASK_FILE), &mask)?;
    atomic_write(&dir.join("mask.txt"), fisher::io::export_text(scores.as_ref(), Some(&mask))?.as_bytes())?;
    println!("wrote {} mask keeping {} of {} coordinates to {}", mask.strategy(), mask.k(), mask.len(), dir.display());
    Ok(())
}

fn train_cmd(cfg: &ExperimentConfig) -> Result<()> {
    out_dir(cfg)?;
    let r = run_experiment(cfg)?;
    println!(
        "{} {}: k={} ratio1={:.6e} ratio2={:.6} eval_loss={:.6} eval_accuracy={:.6}{}",
        cfg.peft.method,
        cfg.strategy,
        r.k,
        r.ratio1,
        r.ratio2,
        r.final_eval_loss,
        r.final_eval_accuracy,
        r.diverged.as_deref().map(|d| format!(" (diverged: {d})")).unwrap_or_default()
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let task = generate_task(&cfg.task)?;
    let (loss, acc) = evaluate(&ckpt.model, ckpt.peft.as_ref(), &task.eval)?;
    println!("eval_loss={loss:.6} eval_accuracy={acc:.6}");
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir)?;
        let value = serde_json::json!({
            "checkpoint": a.checkpoint,
            "config_hash": ckpt.config_hash,
            "eval_loss": loss,
            "eval_accuracy": acc,
        });
        write_json(&dir.join("eval.json"), &value)?;
    }
    Ok(())
}

fn compare_cmd(a: &CompareArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    out_dir(&cfg)?;
    if let Some(extra) = a.pair_extra_layers {
        let layers = cfg.peft.target_layers.len();
        let (plan, original, masked) = run_fixed_proportion(&cfg, layers, extra)?;
        println!(
            "dense on {} layers: ratio1={:.6e} accuracy={:.6}\n{} on {} layers (k={}): ratio1={:.6e} accuracy={:.6} residual={:+.3}",
            plan.original_layers,
            plan.original_ratio1,
            original.final_eval_accuracy,
            cfg.strategy,
            plan.masked_layers,
            plan.masked_k,
            plan.masked_ratio1,
            masked.final_eval_accuracy,
            plan.residual
        );
        return Ok(());
    }
    let strategies: Vec<Strategy> = a.strategies.clone();
    let table = compare_strategies(&cfg, &strategies, &a.budgets, &a.seeds)?;
    print!("{}", table.to_tsv());
    let failed: Vec<String> = table
        .runs
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("{} @ {} seed {}: {e}", r.strategy, r.budget, r.seed)))
        .collect();
    for f in &failed {
        eprintln!("run failed: {f}");
    }
    Ok(())
}

fn report_cmd(a: &ReportArgs) -> Result<()> {
    let paths: Vec<PathBuf> = a.paths.clone();
    let text = render_report(&paths)?;
    match &a.out {
        Some(p) => atomic_write(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}
