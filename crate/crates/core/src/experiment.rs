//! End-to-end pipeline: corpus, backbone pretraining, compression, prompt and
//! gate pretraining, then centralised or federated training and the sweeps.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    forward_plain, pretrain_backbone, pretrain_input_prompts, Backbone, ModelConfig, PretrainSettings,
};
use crate::compression::{compress, sparsity, CompressionSpec};
use crate::corpus::{generate_corpus, load_corpus, CorpusConfig, Sample, TaskCorpus};
use crate::error::{MopsError, Result};
use crate::federated::{partition_skewed, train_federated, FederationConfig, RoundMetrics};
use crate::mop::{
    argmax, pretrain_gating, GatePretrainSettings, GateVector, GatingParams, InjectedPrompts, LabeledInstruction,
};
use crate::numerics::derive_seed;
use crate::trainer::{
    evaluate, loss, next_token_targets, train_centralized, train_step, EvalReport, LossReport, RunMetrics, TrainMode,
    TrainSettings, TrainableState,
};

/// Seed stream tags; every stage draws from its own stream.
mod stream {
    pub const CORPUS: u64 = 1;
    pub const BACKBONE: u64 = 2;
    pub const INPUT_PROMPTS: u64 = 3;
    pub const GATE: u64 = 4;
    pub const INJECTED: u64 = 5;
    pub const TRAIN: u64 = 6;
    pub const PARTITION: u64 = 7;
    pub const FEDERATION: u64 = 8;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum CorpusSource {
    Generate { config: CorpusConfig },
    File { path: PathBuf },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Generate { config: CorpusConfig::toy_four() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub corpus: CorpusSource,
    pub compression: CompressionSpec,
    pub backbone_pretrain: PretrainSettings,
    pub prompt_pretrain: PretrainSettings,
    pub gate_pretrain: GatePretrainSettings,
    pub train: TrainSettings,
    pub federation: Option<FederationConfig>,
    pub mode: TrainMode,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            corpus: CorpusSource::default(),
            compression: CompressionSpec::Unstructured { ratio: 0.75 },
            backbone_pretrain: PretrainSettings { steps: 30_000, lr: 1e-3, warmup: 500, cosine: true },
            prompt_pretrain: PretrainSettings::constant(20, 1e-3),
            gate_pretrain: GatePretrainSettings { steps: 1000, lr: 1e-3 },
            train: TrainSettings::default(),
            federation: None,
            mode: TrainMode::Mop,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Field-level checks, with messages that name the offending field.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| MopsError::Config(format!("model: {e}")))?;
        self.compression.validate().map_err(|e| MopsError::Config(format!("compression: {e}")))?;
        if let CorpusSource::Generate { config } = &self.corpus {
            config.validate().map_err(|e| MopsError::Config(format!("corpus.config: {e}")))?;
            if config.vocab_size != self.model.vocab_size || config.max_seq_len > self.model.max_seq_len {
                return Err(MopsError::Config(format!(
                    "corpus.config: vocab_size {} / max_seq_len {} do not fit model {} / {}",
                    config.vocab_size, config.max_seq_len, self.model.vocab_size, self.model.max_seq_len
                )));
            }
        }
        for (name, lr) in [
            ("backbone_pretrain.lr", self.backbone_pretrain.lr),
            ("prompt_pretrain.lr", self.prompt_pretrain.lr),
            ("gate_pretrain.lr", self.gate_pretrain.lr),
            ("train.lr", self.train.lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(MopsError::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if let Some(c) = self.train.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(MopsError::Config(format!("train.clip_norm must be positive, got {c}")));
            }
        }
        if let Some(f) = &self.federation {
            f.validate().map_err(|e| MopsError::Config(format!("federation: {e}")))?;
        }
        Ok(())
    }

    pub fn stage_seed(&self, tag: u64) -> u64 {
        derive_seed(self.seed, tag)
    }
}

pub fn load_or_generate_corpus(config: &RunConfig) -> Result<TaskCorpus> {
    match &config.corpus {
        CorpusSource::Generate { config: c } => generate_corpus(c, config.stage_seed(stream::CORPUS)),
        CorpusSource::File { path } => load_corpus(path),
    }
}

/// Dense backbone pretrained on the training split.
pub fn dense_backbone(config: &RunConfig, corpus: &TaskCorpus) -> Result<Backbone> {
    pretrain_backbone(
        &config.model,
        &corpus.train_owned(),
        config.backbone_pretrain,
        config.stage_seed(stream::BACKBONE),
    )
}

/// Test loss of the backbone with no prompts at all.
pub fn plain_loss(backbone: &Backbone, samples: &[Sample]) -> Result<LossReport> {
    let mut reports = Vec::with_capacity(samples.len());
    for s in samples {
        let trace = forward_plain(backbone, &s.tokens)?;
        reports.push(loss(trace.logits(), next_token_targets(&s.tokens))?);
    }
    LossReport::combine(&reports).ok_or_else(|| MopsError::Input("no samples to score".into()))
}

/// Everything the adaptation phase starts from.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Compressed backbone with trained first-layer prompts in place.
    pub backbone: Backbone,
    pub gating: GatingParams,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub sparsity: f64,
}

/// Gate group assigned to a task: one-to-one while tasks fit, wrapping
/// otherwise.
pub fn assigned_group(task: usize, experts: usize) -> usize {
    task % experts
}

pub fn labeled_instructions(samples: &[Sample], experts: usize) -> Vec<LabeledInstruction> {
    samples
        .iter()
        .map(|s| LabeledInstruction { tokens: s.instruction().to_vec(), label: assigned_group(s.task, experts) })
        .collect()
}

/// Rebuilds a dense backbone for `config.model`, carrying over weights when
/// only adaptation-side fields (injection layer, prompt counts) differ.
fn with_model(dense: &Backbone, model: &ModelConfig) -> Result<Backbone> {
    let mut b = dense.clone();
    let mut same = model.clone();
    same.injection_layer = dense.config.injection_layer;
    same.experts = dense.config.experts;
    same.prompts_per_expert = dense.config.prompts_per_expert;
    same.prompt_norm = dense.config.prompt_norm;
    if same != dense.config {
        return Err(MopsError::Config("model differs from the pretrained backbone beyond adaptation fields".into()));
    }
    model.validate()?;
    b.config = model.clone();
    Ok(b)
}

/// Compression, then first-layer prompt pretraining, then gate pretraining,
/// all against the compressed backbone.
pub fn prepare(config: &RunConfig, corpus: &TaskCorpus, dense: &Backbone) -> Result<Prepared> {
    config.validate()?;
    let dense = with_model(dense, &config.model)?;
    let train = corpus.train_owned();
    let test = corpus.test_owned();
    let mut backbone = compress(&dense, &config.compression)?;
    backbone.input_prompts =
        pretrain_input_prompts(&backbone, &train, config.prompt_pretrain, config.stage_seed(stream::INPUT_PROMPTS))?;
    let gating = pretrain_gating(
        &GatingParams::init(&config.model, config.stage_seed(stream::GATE))?,
        &labeled_instructions(&train, config.model.experts),
        &backbone,
        &backbone.input_prompts,
        config.gate_pretrain,
        config.stage_seed(stream::GATE),
    )?;
    let sparsity = sparsity(&backbone);
    Ok(Prepared { backbone, gating, train, test, sparsity })
}

pub fn initial_state(config: &RunConfig, prepared: &Prepared) -> Result<TrainableState> {
    let injected = InjectedPrompts::init(&config.model, config.stage_seed(stream::INJECTED))?;
    Ok(TrainableState::new(injected, prepared.gating.clone()))
}

#[derive(Debug, Clone)]
pub struct CentralizedRun {
    pub state: TrainableState,
    pub metrics: RunMetrics,
    pub before: EvalReport,
    pub after: EvalReport,
}

impl CentralizedRun {
    pub fn final_ppl(&self) -> f64 {
        self.after.loss.ppl
    }
}

pub fn run_centralized(config: &RunConfig, prepared: &Prepared) -> Result<CentralizedRun> {
    let state = initial_state(config, prepared)?;
    let b = &prepared.backbone;
    let before = evaluate(b, &b.input_prompts, &state, &prepared.test, config.mode, config.train.gate_input)?;
    let (state, metrics) = train_centralized(
        b,
        &b.input_prompts,
        state,
        &prepared.train,
        &prepared.test,
        &config.train,
        config.stage_seed(stream::TRAIN),
        config.mode,
    )?;
    let after = evaluate(b, &b.input_prompts, &state, &prepared.test, config.mode, config.train.gate_input)?;
    Ok(CentralizedRun { state, metrics, before, after })
}

#[derive(Debug, Clone)]
pub struct FederatedRun {
    pub state: TrainableState,
    pub rounds: RoundMetrics,
    pub after: EvalReport,
    pub partitions: Vec<crate::federated::ClientPartition>,
}

pub fn run_federated(config: &RunConfig, prepared: &Prepared) -> Result<FederatedRun> {
    let fed = config
        .federation
        .as_ref()
        .ok_or_else(|| MopsError::Config("federation: section required for federated training".into()))?;
    let partitions =
        partition_skewed(&prepared.train, fed.n_clients, fed.skew_factor, config.stage_seed(stream::PARTITION))?;
    let b = &prepared.backbone;
    let (state, rounds) = train_federated(
        b,
        &b.input_prompts,
        initial_state(config, prepared)?,
        &partitions,
        fed,
        &config.train,
        &prepared.test,
        config.mode,
        config.stage_seed(stream::FEDERATION),
    )?;
    let after = evaluate(b, &b.input_prompts, &state, &prepared.test, config.mode, config.train.gate_input)?;
    Ok(FederatedRun { state, rounds, after, partitions })
}

/// `(baseline − mop) / mop`.
pub fn relative_gain(baseline_ppl: f64, mop_ppl: f64) -> f64 {
    (baseline_ppl - mop_ppl) / mop_ppl
}

/// Mean wall time of one training step in milliseconds, best of `repeats`
/// passes over the same `steps` samples.
pub fn time_train_step(config: &RunConfig, prepared: &Prepared, steps: usize, repeats: usize) -> Result<f64> {
    let b = &prepared.backbone;
    let start_state = initial_state(config, prepared)?;
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let mut state = start_state.clone();
        let t0 = Instant::now();
        for s in prepared.train.iter().cycle().take(steps) {
            train_step(b, &b.input_prompts, &mut state, s, &config.train, config.mode)?;
        }
        best = best.min(t0.elapsed().as_secs_f64() * 1e3 / steps.max(1) as f64);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRow {
    pub layer: usize,
    pub final_ppl: f64,
    pub step_time_ms: f64,
    /// Set when the prompts enter at the top layer only.
    pub top_layer: bool,
}

pub const TIMING_STEPS: usize = 100;

/// One full run per injection layer from a shared dense backbone.
pub fn sweep_injection(
    config: &RunConfig,
    corpus: &TaskCorpus,
    dense: &Backbone,
    layers: &[usize],
) -> Result<Vec<InjectionRow>> {
    let mut rows = Vec::with_capacity(layers.len());
    for &layer in layers {
        if layer == 0 || layer > config.model.layers {
            return Err(MopsError::Config(format!("injection layer {layer} outside 1..={}", config.model.layers)));
        }
        let mut c = config.clone();
        c.model.injection_layer = layer;
        let prepared = prepare(&c, corpus, dense)?;
        let step_time_ms = time_train_step(&c, &prepared, TIMING_STEPS, 3)?;
        let run = run_centralized(&c, &prepared)?;
        rows.push(InjectionRow { layer, final_ppl: run.final_ppl(), step_time_ms, top_layer: layer == c.model.layers });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSweepRow {
    pub m: usize,
    pub steps_to_threshold: Option<usize>,
    pub final_ppl: f64,
}

/// One run per prompts-per-expert value. The threshold is 1.5× the best
/// final PPL across the sweep.
pub fn sweep_prompts(
    config: &RunConfig,
    corpus: &TaskCorpus,
    dense: &Backbone,
    m_values: &[usize],
) -> Result<Vec<PromptSweepRow>> {
    let mut runs = Vec::with_capacity(m_values.len());
    for &m in m_values {
        if m == 0 {
            return Err(MopsError::Config("prompts per expert must be at least 1".into()));
        }
        let mut c = config.clone();
        c.model.prompts_per_expert = m;
        let prepared = prepare(&c, corpus, dense)?;
        runs.push((m, run_centralized(&c, &prepared)?));
    }
    let best = runs.iter().map(|(_, r)| r.final_ppl()).fold(f64::INFINITY, f64::min);
    let threshold = 1.5 * best;
    Ok(runs
        .into_iter()
        .map(|(m, r)| PromptSweepRow { m, steps_to_threshold: r.metrics.steps_to(threshold), final_ppl: r.final_ppl() })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    /// Per task (ascending id): mean gate mass of each expert group.
    pub tasks: Vec<usize>,
    pub group_mass: Vec<Vec<f64>>,
    pub argmax_group: Vec<usize>,
    pub sharpness: Vec<f64>,
}

impl GateReport {
    pub fn mean_sharpness(&self) -> f64 {
        self.sharpness.iter().sum::<f64>() / self.sharpness.len() as f64
    }

    pub fn argmax_of(&self, task: usize) -> Option<usize> {
        self.tasks.iter().position(|t| *t == task).map(|i| self.argmax_group[i])
    }

    pub fn to_csv(&self) -> String {
        let groups = self.group_mass.first().map_or(0, Vec::len);
        let mut out = String::from("task");
        for e in 0..groups {
            out.push_str(&format!(",group{e}"));
        }
        out.push_str(",argmax_group,sharpness\n");
        for (i, t) in self.tasks.iter().enumerate() {
            out.push_str(&t.to_string());
            for v in &self.group_mass[i] {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{},{}\n", self.argmax_group[i], self.sharpness[i]));
        }
        out
    }
}

/// Aggregates a per-sample gate log into per-task expert-group masses.
pub fn gate_report(log: &[(usize, GateVector)], per_expert: usize) -> Result<GateReport> {
    if log.is_empty() {
        return Err(MopsError::Input("gate log is empty".into()));
    }
    if per_expert == 0 || log.iter().any(|(_, g)| g.len() % per_expert != 0 || g.len() != log[0].1.len()) {
        return Err(MopsError::Input(format!("gate vectors do not split into groups of {per_expert}")));
    }
    let averaged = crate::trainer::average_by_task(log);
    let mut report =
        GateReport { tasks: Vec::new(), group_mass: Vec::new(), argmax_group: Vec::new(), sharpness: Vec::new() };
    for (task, g) in averaged {
        let masses = g.group_masses(per_expert);
        report.argmax_group.push(argmax(&masses));
        report.sharpness.push(masses.iter().cloned().fold(0.0, f64::max));
        report.tasks.push(task);
        report.group_mass.push(masses);
    }
    Ok(report)
}
