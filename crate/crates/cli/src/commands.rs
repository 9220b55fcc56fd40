use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use mops_core::backbone::{load_backbone, save_backbone, Backbone};
use mops_core::compression::{compress as apply_compression, sparsity};
use mops_core::corpus::{load_corpus, save_corpus, TaskCorpus};
use mops_core::experiment::{
    dense_backbone, gate_report as build_gate_report, load_or_generate_corpus, plain_loss, prepare, run_centralized,
    run_federated, sweep_injection as run_injection_sweep, sweep_prompts as run_prompt_sweep, Prepared, RunConfig,
};
use mops_core::federated::save_partitions;
use mops_core::mop::{read_gate_log, write_gate_log};
use mops_core::trainer::{evaluate, TrainMode, TrainableState};
use mops_core::MopsError;
use serde_json::{json, Value};

use crate::{Common, ModeArg, StageArg};

/// Marks failures caused by the invocation rather than the run itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<MopsError>() {
        Some(MopsError::Config(_)) => 2,
        _ => 1,
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("missing input file {}", path.display())))
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => serde_json::from_str::<RunConfig>(&read_input(path)?)
            .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(mode) = common.mode {
        config.mode = match mode {
            ModeArg::Baseline => TrainMode::Baseline,
            ModeArg::Mop => TrainMode::Mop,
        };
    }
    config.validate().map_err(|e| usage(format!("invalid config: {e}")))?;
    Ok(config)
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn finish(out: &Path, summary: Value) -> Result<String> {
    write_json(&out.join("summary.json"), &summary)?;
    Ok(serde_json::to_string(&summary)?)
}

fn obtain_dense(config: &RunConfig, corpus: &TaskCorpus, path: Option<&Path>) -> Result<Backbone> {
    match path {
        Some(p) => {
            require_file(p)?;
            Ok(load_backbone(p).with_context(|| format!("loading {}", p.display()))?)
        }
        None => Ok(dense_backbone(config, corpus)?),
    }
}

fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Baseline => "baseline",
        TrainMode::Mop => "mop",
    }
}

pub fn pretrain(common: &Common) -> Result<String> {
    let config = load_config(common)?;
    out_dir(&common.out)?;
    let corpus = load_or_generate_corpus(&config)?;
    let dense = dense_backbone(&config, &corpus)?;
    write_json(&common.out.join("config.json"), &config)?;
    save_corpus(&corpus, &common.out.join("corpus.jsonl"))?;
    save_backbone(&dense, &common.out.join("dense.bin"))?;
    let report = plain_loss(&dense, &corpus.test_owned())?;
    finish(
        &common.out,
        json!({
            "command": "pretrain",
            "seed": config.seed,
            "steps": config.backbone_pretrain.steps,
            "test_nll": report.nll,
            "test_ppl": report.ppl,
        }),
    )
}

pub fn compress(common: &Common, backbone: &Path) -> Result<String> {
    let config = load_config(common)?;
    require_file(backbone)?;
    out_dir(&common.out)?;
    let dense = load_backbone(backbone)?;
    let corpus = load_or_generate_corpus(&config)?;
    let compressed = apply_compression(&dense, &config.compression)?;
    write_json(&common.out.join("config.json"), &config)?;
    save_backbone(&compressed, &common.out.join("compressed.bin"))?;
    let test = corpus.test_owned();
    let before = plain_loss(&dense, &test)?;
    let after = plain_loss(&compressed, &test)?;
    finish(
        &common.out,
        json!({
            "command": "compress",
            "compression": config.compression.label(),
            "sparsity": sparsity(&compressed),
            "dense_test_ppl": before.ppl,
            "test_ppl": after.ppl,
        }),
    )
}

fn write_prepared(out: &Path, config: &RunConfig, corpus: &TaskCorpus, prepared: &Prepared) -> Result<()> {
    write_json(&out.join("config.json"), config)?;
    save_corpus(corpus, &out.join("corpus.jsonl"))?;
    save_backbone(&prepared.backbone, &out.join("backbone.bin"))?;
    write_json(&out.join("gating_pretrained.json"), &prepared.gating)?;
    Ok(())
}

pub fn train(common: &Common, backbone: Option<&Path>) -> Result<String> {
    let config = load_config(common)?;
    out_dir(&common.out)?;
    let corpus = load_or_generate_corpus(&config)?;
    let dense = obtain_dense(&config, &corpus, backbone)?;
    let prepared = prepare(&config, &corpus, &dense)?;
    write_prepared(&common.out, &config, &corpus, &prepared)?;
    let run = run_centralized(&config, &prepared)?;
    write_json(&common.out.join("state.json"), &run.state)?;
    run.metrics.write_csv(&common.out.join("metrics.csv"))?;
    write_gate_log(&common.out.join("gates_pretrained.csv"), &run.before.gate_log)?;
    write_gate_log(&common.out.join("gates.csv"), &run.after.gate_log)?;
    finish(
        &common.out,
        json!({
            "command": "train",
            "mode": mode_name(config.mode),
            "seed": config.seed,
            "compression": config.compression.label(),
            "sparsity": prepared.sparsity,
            "steps": config.train.steps,
            "initial_test_ppl": run.before.loss.ppl,
            "final_test_nll": run.after.loss.nll,
            "final_test_ppl": run.after.loss.ppl,
        }),
    )
}

pub fn train_federated(common: &Common, backbone: Option<&Path>) -> Result<String> {
    let config = load_config(common)?;
    let fed = config.federation.clone().ok_or_else(|| usage("invalid config: federation section is required"))?;
    out_dir(&common.out)?;
    let corpus = load_or_generate_corpus(&config)?;
    let dense = obtain_dense(&config, &corpus, backbone)?;
    let prepared = prepare(&config, &corpus, &dense)?;
    write_prepared(&common.out, &config, &corpus, &prepared)?;
    let run = run_federated(&config, &prepared)?;
    write_json(&common.out.join("state.json"), &run.state)?;
    run.rounds.write_csv(&common.out.join("rounds.csv"))?;
    save_partitions(&run.partitions, &common.out.join("partitions.json"))?;
    write_gate_log(&common.out.join("gates.csv"), &run.after.gate_log)?;
    finish(
        &common.out,
        json!({
            "command": "train-federated",
            "mode": mode_name(config.mode),
            "seed": config.seed,
            "compression": config.compression.label(),
            "sparsity": prepared.sparsity,
            "rounds": fed.rounds(),
            "final_test_nll": run.after.loss.nll,
            "final_test_ppl": run.after.loss.ppl,
        }),
    )
}

pub fn eval(run: &Path, out: &Path) -> Result<String> {
    for name in ["config.json", "corpus.jsonl", "backbone.bin", "state.json"] {
        require_file(&run.join(name))?;
    }
    let config: RunConfig = serde_json::from_str(&read_input(&run.join("config.json"))?)
        .map_err(|e| usage(format!("invalid config in run directory: {e}")))?;
    let corpus = load_corpus(&run.join("corpus.jsonl"))?;
    let backbone = load_backbone(&run.join("backbone.bin"))?;
    let state: TrainableState = serde_json::from_str(&read_input(&run.join("state.json"))?)?;
    out_dir(out)?;
    let report = evaluate(
        &backbone,
        &backbone.input_prompts,
        &state,
        &corpus.test_owned(),
        config.mode,
        config.train.gate_input,
    )?;
    write_gate_log(&out.join("gates.csv"), &report.gate_log)?;
    finish(
        out,
        json!({
            "command": "eval",
            "mode": mode_name(config.mode),
            "seed": config.seed,
            "test_nll": report.loss.nll,
            "test_ppl": report.loss.ppl,
            "tokens": report.loss.tokens,
        }),
    )
}

pub fn sweep_injection(common: &Common, backbone: Option<&Path>, layers: &[usize]) -> Result<String> {
    let config = load_config(common)?;
    if let Some(bad) = layers.iter().find(|&&l| l == 0 || l > config.model.layers) {
        return Err(usage(format!("--layers: {bad} is outside 1..={}", config.model.layers)));
    }
    out_dir(&common.out)?;
    let corpus = load_or_generate_corpus(&config)?;
    let dense = obtain_dense(&config, &corpus, backbone)?;
    let rows = run_injection_sweep(&config, &corpus, &dense, layers)?;
    write_json(&common.out.join("config.json"), &config)?;
    let mut text = String::from("layer,final_ppl,step_time_ms\n");
    for r in &rows {
        text.push_str(&format!("{},{},{}\n", r.layer, r.final_ppl, r.step_time_ms));
    }
    fs::write(common.out.join("sweep_injection.csv"), text)?;
    let top: Vec<usize> = rows.iter().filter(|r| r.top_layer).map(|r| r.layer).collect();
    finish(
        &common.out,
        json!({
            "command": "sweep-injection",
            "seed": config.seed,
            "layers": layers,
            "final_ppl": rows.iter().map(|r| r.final_ppl).collect::<Vec<_>>(),
            "top_layer_only": top,
        }),
    )
}

pub fn sweep_prompts(common: &Common, backbone: Option<&Path>, m_values: &[usize]) -> Result<String> {
    let config = load_config(common)?;
    if m_values.contains(&0) {
        return Err(usage("--m: values must be at least 1"));
    }
    out_dir(&common.out)?;
    let corpus = load_or_generate_corpus(&config)?;
    let dense = obtain_dense(&config, &corpus, backbone)?;
    let rows = run_prompt_sweep(&config, &corpus, &dense, m_values)?;
    write_json(&common.out.join("config.json"), &config)?;
    let mut text = String::from("m,steps_to_threshold,final_ppl\n");
    for r in &rows {
        let steps = r.steps_to_threshold.map(|s| s.to_string()).unwrap_or_default();
        text.push_str(&format!("{},{steps},{}\n", r.m, r.final_ppl));
    }
    fs::write(common.out.join("sweep_prompts.csv"), text)?;
    finish(
        &common.out,
        json!({
            "command": "sweep-prompts",
            "seed": config.seed,
            "m": m_values,
            "steps_to_threshold": rows.iter().map(|r| r.steps_to_threshold).collect::<Vec<_>>(),
        }),
    )
}

pub fn gate_report(log: &Path, stage: StageArg, per_expert: usize, out: &Path) -> Result<String> {
    require_file(log)?;
    if per_expert == 0 {
        return Err(usage("--per-expert must be at least 1"));
    }
    let rows = read_gate_log(log)?;
    let report = build_gate_report(&rows, per_expert)?;
    out_dir(out)?;
    let stage = match stage {
        StageArg::Pretrained => "pretrained",
        StageArg::Trained => "trained",
    };
    fs::write(out.join(format!("gate_report_{stage}.csv")), report.to_csv())?;
    finish(
        out,
        json!({
            "command": "gate-report",
            "stage": stage,
            "argmax_group": report.argmax_group,
            "mean_sharpness": report.mean_sharpness(),
        }),
    )
}
