use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, EpochSampler};
use crate::corpus::{Sample, Split};
use crate::error::{MopsError, Result};
use crate::mop::{forward_mop, GateMode, GateSpan, GateVector, MopOptions};
use crate::numerics::Matrix;
use crate::trainer::{backward_mop, loss, next_token_targets, AdamConfig, LossReport, TrainableState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Prompt tuning of the injected prompts with the gate bypassed.
    Baseline,
    /// Gate-scaled prompts, gate trained alongside.
    Mop,
}

impl TrainMode {
    pub fn gate_mode(self) -> GateMode {
        match self {
            TrainMode::Baseline => GateMode::AllOnes,
            TrainMode::Mop => GateMode::Learned,
        }
    }
}

/// Columns averaged into the gate input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateInput {
    AllColumns,
    Instruction,
}

impl GateInput {
    pub fn span_for(self, sample: &Sample) -> GateSpan {
        match self {
            GateInput::AllColumns => GateSpan::All,
            GateInput::Instruction => GateSpan::Prefix(sample.instruction_len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub lr: f64,
    /// 0 disables periodic evaluation.
    pub eval_every: usize,
    pub gate_input: GateInput,
    pub train_gate: bool,
    pub clip_norm: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 1e-3,
            eval_every: 250,
            gate_input: GateInput::Instruction,
            train_gate: true,
            clip_norm: None,
        }
    }
}

pub fn mop_options(mode: TrainMode, gate_input: GateInput, sample: &Sample) -> MopOptions {
    MopOptions { mode: mode.gate_mode(), span: gate_input.span_for(sample) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub split: Split,
    pub nll: f64,
    pub ppl: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rows: Vec<MetricRow>,
}

impl RunMetrics {
    pub fn push(&mut self, step: usize, split: Split, report: &LossReport) {
        self.rows.push(MetricRow { step, split, nll: report.nll, ppl: report.ppl });
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn final_test(&self) -> Option<&MetricRow> {
        self.split(Split::Test).last()
    }

    /// Smallest evaluated step whose held-out PPL is at or below `threshold`.
    pub fn steps_to(&self, threshold: f64) -> Option<usize> {
        self.split(Split::Test).find(|r| r.ppl <= threshold).map(|r| r.step)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?;
        Ok(Self { rows })
    }
}

/// One optimisation step on a single sample. Returns the pre-update loss.
pub fn train_step(
    backbone: &Backbone,
    input_prompts: &Matrix,
    state: &mut TrainableState,
    sample: &Sample,
    settings: &TrainSettings,
    mode: TrainMode,
) -> Result<LossReport> {
    let options = mop_options(mode, settings.gate_input, sample);
    let trace = forward_mop(backbone, input_prompts, &state.injected, &state.gating, &sample.tokens, options)?;
    let (report, mut grads) = backward_mop(backbone, &trace, next_token_targets(&sample.tokens), state)?;
    if !report.nll.is_finite() {
        return Err(MopsError::Diverged { step: state.step, detail: format!("training loss {}", report.nll) });
    }
    if let Some(max) = settings.clip_norm {
        let n = grads.norm();
        if n > max {
            grads.scale(max / n);
        }
    }
    let adam = AdamConfig::with_lr(settings.lr);
    match (&grads.gating, settings.train_gate) {
        (Some(g), true) => state.moments.update(
            &adam,
            vec![
                state.injected.prompts.as_mut_slice(),
                state.gating.hidden.as_mut_slice(),
                state.gating.output.as_mut_slice(),
            ],
            vec![grads.prompts.as_slice(), g.hidden.as_slice(), g.output.as_slice()],
        ),
        _ => state.moments.update(&adam, vec![state.injected.prompts.as_mut_slice()], vec![grads.prompts.as_slice()]),
    }
    state.step += 1;
    Ok(report)
}

/// Seeded batch-size-one training of the injected prompts (and, in MoP mode,
/// the gate). Periodic held-out evaluation lands in the metrics stream.
#[allow(clippy::too_many_arguments)]
pub fn train_centralized(
    backbone: &Backbone,
    input_prompts: &Matrix,
    mut state: TrainableState,
    train: &[Sample],
    eval: &[Sample],
    settings: &TrainSettings,
    seed: u64,
    mode: TrainMode,
) -> Result<(TrainableState, RunMetrics)> {
    let mut metrics = RunMetrics::default();
    if settings.steps == 0 {
        return Ok((state, metrics));
    }
    if train.is_empty() {
        return Err(MopsError::Input("no training samples".into()));
    }
    let mut sampler = EpochSampler::new(train.len(), seed);
    for i in 0..settings.steps {
        let report = train_step(backbone, input_prompts, &mut state, &train[sampler.next_index()], settings, mode)?;
        metrics.push(state.step, Split::Train, &report);
        let due =
            settings.eval_every > 0 && (state.step.is_multiple_of(settings.eval_every) || i + 1 == settings.steps);
        if due && !eval.is_empty() {
            let r = evaluate(backbone, input_prompts, &state, eval, mode, settings.gate_input)?;
            metrics.push(state.step, Split::Test, &r.loss);
        }
    }
    Ok((state, metrics))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub loss: LossReport,
    /// Mean gate vector per task, ordered by task id.
    pub task_gates: Vec<(usize, GateVector)>,
    /// One gate vector per evaluated sample.
    pub gate_log: Vec<(usize, GateVector)>,
}

pub fn evaluate(
    backbone: &Backbone,
    input_prompts: &Matrix,
    state: &TrainableState,
    eval: &[Sample],
    mode: TrainMode,
    gate_input: GateInput,
) -> Result<EvalReport> {
    if eval.is_empty() {
        return Err(MopsError::Input("empty evaluation set".into()));
    }
    let mut reports = Vec::with_capacity(eval.len());
    let mut gate_log = Vec::with_capacity(eval.len());
    for s in eval {
        let trace = forward_mop(
            backbone,
            input_prompts,
            &state.injected,
            &state.gating,
            &s.tokens,
            mop_options(mode, gate_input, s),
        )?;
        reports.push(loss(trace.logits(), next_token_targets(&s.tokens))?);
        gate_log.push((s.task, trace.gate.gate));
    }
    let loss = LossReport::combine(&reports).expect("non-empty");
    Ok(EvalReport { loss, task_gates: average_by_task(&gate_log), gate_log })
}

pub fn average_by_task(log: &[(usize, GateVector)]) -> Vec<(usize, GateVector)> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (task, g) in log {
        let e = sums.entry(*task).or_insert_with(|| (vec![0.0; g.len()], 0));
        for (a, v) in e.0.iter_mut().zip(g.as_slice()) {
            *a += v;
        }
        e.1 += 1;
    }
    sums.into_iter().map(|(t, (s, n))| (t, GateVector(s.into_iter().map(|v| v / n as f64).collect()))).collect()
}
