//! Mid-layer expert prompts, the gating network, and the gated forward pass.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{
    embed_tokens, head_forward, layer_forward, validate_tokens, Backbone, EpochSampler, ForwardTrace, ModelConfig,
};
use crate::error::{MopsError, Result};
use crate::numerics::{concat_columns, mean_of_columns, softmax, Matrix};
use crate::trainer::{AdamConfig, AdamMoments};

const GATE_OUT_STD: f64 = 0.02;

/// Two-layer gating MLP: `hidden` is `d_gate × d_model`, `output` is
/// `K × d_gate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingParams {
    pub hidden: Matrix,
    pub output: Matrix,
}

impl GatingParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = Normal::new(0.0, 1.0 / (config.d_model as f64).sqrt()).expect("positive std");
        let w2 = Normal::new(0.0, GATE_OUT_STD).expect("positive std");
        let hidden = Matrix::from_fn(config.d_gate, config.d_model, |_, _| w1.sample(&mut rng));
        let output = Matrix::from_fn(config.total_prompts(), config.d_gate, |_, _| w2.sample(&mut rng));
        Ok(Self { hidden, output })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: Matrix::zeros(self.hidden.rows(), self.hidden.cols()),
            output: Matrix::zeros(self.output.rows(), self.output.cols()),
        }
    }

    pub fn prompt_count(&self) -> usize {
        self.output.rows()
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let want_hidden = (config.d_gate, config.d_model);
        let want_output = (config.total_prompts(), config.d_gate);
        if self.hidden.shape() != want_hidden || self.output.shape() != want_output {
            return Err(MopsError::Shape(format!(
                "gating params {:?}/{:?} do not match config {:?}/{:?}",
                self.hidden.shape(),
                self.output.shape(),
                want_hidden,
                want_output
            )));
        }
        Ok(())
    }
}

/// `K = experts × per_expert` prompt columns injected at the injection layer.
/// Expert `e` owns columns `e·m .. e·m + m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedPrompts {
    pub prompts: Matrix,
    pub experts: usize,
    pub per_expert: usize,
}

impl InjectedPrompts {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, config.prompt_init_std()).expect("positive std");
        let prompts = Matrix::from_fn(config.d_model, config.total_prompts(), |_, _| dist.sample(&mut rng));
        Self::new(prompts, config.experts, config.prompts_per_expert)
    }

    pub fn new(prompts: Matrix, experts: usize, per_expert: usize) -> Result<Self> {
        if prompts.cols() != experts * per_expert {
            return Err(MopsError::Shape(format!(
                "{} prompt columns cannot form {experts} groups of {per_expert}",
                prompts.cols()
            )));
        }
        Ok(Self { prompts, experts, per_expert })
    }

    pub fn len(&self) -> usize {
        self.prompts.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.cols() == 0
    }

    pub fn group_of(&self, column: usize) -> usize {
        column / self.per_expert
    }
}

/// Per-prompt gate weights, a point on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateVector(pub Vec<f64>);

impl GateVector {
    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Summed mass of each contiguous block of `per_expert` prompts.
    pub fn group_masses(&self, per_expert: usize) -> Vec<f64> {
        self.0.chunks(per_expert.max(1)).map(|c| c.iter().sum()).collect()
    }

    pub fn argmax_group(&self, per_expert: usize) -> usize {
        argmax(&self.group_masses(per_expert))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Intermediate values of one gate evaluation, kept for backprop.
#[derive(Debug, Clone)]
pub struct GateTrace {
    pub input: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub activated: Vec<f64>,
    pub gate: GateVector,
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

pub fn gate_traced(params: &GatingParams, avg_emb: &[f64]) -> Result<GateTrace> {
    if avg_emb.len() != params.hidden.cols() {
        return Err(MopsError::Shape(format!(
            "gate input has length {}, expected {}",
            avg_emb.len(),
            params.hidden.cols()
        )));
    }
    let pre_activation = mat_vec(&params.hidden, avg_emb);
    let activated: Vec<f64> = pre_activation.iter().map(|v| v.max(0.0)).collect();
    let logits = mat_vec(&params.output, &activated);
    let gate = GateVector(softmax(&logits));
    Ok(GateTrace { input: avg_emb.to_vec(), pre_activation, activated, gate })
}

pub fn gate(params: &GatingParams, avg_emb: &[f64]) -> Result<GateVector> {
    Ok(gate_traced(params, avg_emb)?.gate)
}

/// Accumulates parameter gradients given `d_gate = ∂loss/∂g`.
pub fn gate_backward(params: &GatingParams, trace: &GateTrace, d_gate: &[f64], grads: &mut GatingParams) {
    let g = trace.gate.as_slice();
    let inner: f64 = g.iter().zip(d_gate).map(|(a, b)| a * b).sum();
    let d_logits: Vec<f64> = g.iter().zip(d_gate).map(|(gi, di)| gi * (di - inner)).collect();
    gate_backward_from_logits(params, trace, &d_logits, grads);
}

fn gate_backward_from_logits(params: &GatingParams, trace: &GateTrace, d_logits: &[f64], grads: &mut GatingParams) {
    let dg = params.hidden.rows();
    let mut d_act = vec![0.0; dg];
    for (k, &dl) in d_logits.iter().enumerate() {
        if dl == 0.0 {
            continue;
        }
        for ((gw, a), (w, da)) in grads
            .output
            .row_mut(k)
            .iter_mut()
            .zip(&trace.activated)
            .zip(params.output.row(k).iter().zip(d_act.iter_mut()))
        {
            *gw += dl * a;
            *da += dl * w;
        }
    }
    for (h, &da) in d_act.iter().enumerate() {
        if trace.pre_activation[h] <= 0.0 || da == 0.0 {
            continue;
        }
        for (gw, x) in grads.hidden.row_mut(h).iter_mut().zip(&trace.input) {
            *gw += da * x;
        }
    }
}

/// Multiplies prompt column `j < K` by `g_j` in every row.
pub fn scale_prompt_columns(b: &Matrix, g: &GateVector, k: usize) -> Result<Matrix> {
    if k > b.cols() {
        return Err(MopsError::Shape(format!("cannot scale {k} prompt columns of a {}-column matrix", b.cols())));
    }
    if g.len() != k {
        return Err(MopsError::Shape(format!("gate has {} entries for {k} prompts", g.len())));
    }
    Ok(crate::backbone::scale_leading_columns(b, g.as_slice()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// Prompt columns scaled by the learned gate.
    #[default]
    Learned,
    /// Prompt columns multiplied by one. Numerically identical to `Ungated`.
    AllOnes,
    /// No scaling step at all.
    Ungated,
}

/// Which columns of the injection-layer input feed the gate average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "tokens")]
pub enum GateSpan {
    /// Every first-layer prompt and every token column.
    #[default]
    All,
    /// First-layer prompts plus the first `n` token columns.
    Prefix(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MopOptions {
    pub mode: GateMode,
    pub span: GateSpan,
}

#[derive(Debug, Clone)]
pub struct MopTrace {
    pub forward: ForwardTrace,
    pub gate: GateTrace,
    pub options: MopOptions,
    /// 0-based index of the first layer that sees the injected prompts.
    pub injection_index: usize,
    pub injected: usize,
}

impl MopTrace {
    pub fn logits(&self) -> &Matrix {
        self.forward.logits()
    }

    pub fn gate_vector(&self) -> &GateVector {
        &self.gate.gate
    }
}

fn span_columns(span: GateSpan, k1: usize, n: usize) -> usize {
    match span {
        GateSpan::All => k1 + n,
        GateSpan::Prefix(len) => k1 + len.clamp(1, n),
    }
}

/// Runs the layers below the injection layer with `P¹` and returns their
/// output together with their traces.
fn run_lower_layers(
    backbone: &Backbone,
    input_prompts: &Matrix,
    tokens: &[usize],
) -> Result<(Matrix, Vec<crate::backbone::LayerTrace>)> {
    let cfg = &backbone.config;
    validate_tokens(cfg, tokens)?;
    if input_prompts.rows() != cfg.d_model {
        return Err(MopsError::Shape(format!(
            "first-layer prompts must have {} rows, got {}",
            cfg.d_model,
            input_prompts.rows()
        )));
    }
    let k1 = input_prompts.cols();
    let mut stream = concat_columns(input_prompts, &embed_tokens(backbone, tokens))?;
    let lower = cfg.injection_layer - 1;
    let mut layers = Vec::with_capacity(cfg.layers);
    for w in &backbone.layers[..lower] {
        let t = layer_forward(cfg, w, stream, k1, None);
        stream = t.output.clone();
        layers.push(t);
    }
    Ok((stream, layers))
}

/// Mean of the injection-layer input columns selected by `span`.
pub fn injection_average(
    backbone: &Backbone,
    input_prompts: &Matrix,
    tokens: &[usize],
    span: GateSpan,
) -> Result<Vec<f64>> {
    let (stream, _) = run_lower_layers(backbone, input_prompts, tokens)?;
    let k1 = input_prompts.cols();
    Ok(mean_of_columns(&stream, 0, span_columns(span, k1, tokens.len())))
}

/// Gated forward pass: `P¹` below the injection layer, then the injected
/// prompts (scaled by the gate) from the injection layer to the top.
pub fn forward_mop(
    backbone: &Backbone,
    input_prompts: &Matrix,
    injected: &InjectedPrompts,
    gating: &GatingParams,
    tokens: &[usize],
    options: MopOptions,
) -> Result<MopTrace> {
    let cfg = &backbone.config;
    let k = injected.len();
    if injected.prompts.rows() != cfg.d_model {
        return Err(MopsError::Shape(format!(
            "injected prompts must have {} rows, got {}",
            cfg.d_model,
            injected.prompts.rows()
        )));
    }
    if gating.prompt_count() != k {
        return Err(MopsError::Shape(format!("gate emits {} scores for {k} prompts", gating.prompt_count())));
    }
    let (stream, mut layers) = run_lower_layers(backbone, input_prompts, tokens)?;
    let k1 = input_prompts.cols();
    let avg_emb = mean_of_columns(&stream, 0, span_columns(options.span, k1, tokens.len()));
    let gate = gate_traced(gating, &avg_emb)?;

    let carried = if cfg.keep_first_layer_prompts { stream } else { stream.col_block(k1, stream.cols()) };
    let prompt_cols = k + carried.cols() - tokens.len();
    let mut stream = concat_columns(&injected.prompts, &carried)?;
    let ones;
    let scale = match options.mode {
        GateMode::Learned => Some(gate.gate.as_slice()),
        GateMode::AllOnes => {
            ones = vec![1.0; k];
            Some(ones.as_slice())
        }
        GateMode::Ungated => None,
    };
    let injection_index = cfg.injection_layer - 1;
    for w in &backbone.layers[injection_index..] {
        let t = layer_forward(cfg, w, stream, prompt_cols, scale);
        stream = t.output.clone();
        layers.push(t);
    }
    let head = head_forward(backbone, &stream, prompt_cols);
    Ok(MopTrace {
        forward: ForwardTrace { tokens: tokens.to_vec(), layers, head },
        gate,
        options,
        injection_index,
        injected: k,
    })
}

/// Instruction tokens with the index of the task they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstruction {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatePretrainSettings {
    pub steps: usize,
    pub lr: f64,
}

/// Cross-entropy between the gate and a target spread evenly over the
/// prompts of the labelled group, with its gradient at the logits.
pub fn gate_target_loss(g: &GateVector, label: usize, per_expert: usize) -> (f64, Vec<f64>) {
    let lo = label * per_expert;
    let hi = lo + per_expert;
    let w = 1.0 / per_expert as f64;
    let mut loss = 0.0;
    let mut d_logits = g.0.clone();
    for j in lo..hi {
        loss -= w * g.0[j].max(f64::MIN_POSITIVE).ln();
        d_logits[j] -= w;
    }
    (loss, d_logits)
}

/// Supervised pretraining of the gate so that each task routes to its own
/// prompt group. Everything except the gating params is frozen, so the
/// averaged embeddings are computed once up front.
pub fn pretrain_gating(
    gating: &GatingParams,
    labeled: &[LabeledInstruction],
    backbone: &Backbone,
    input_prompts: &Matrix,
    settings: GatePretrainSettings,
    seed: u64,
) -> Result<GatingParams> {
    let cfg = &backbone.config;
    gating.check(cfg)?;
    if let Some(bad) = labeled.iter().find(|s| s.label >= cfg.experts) {
        return Err(MopsError::Input(format!("task label {} but only {} expert groups", bad.label, cfg.experts)));
    }
    let mut params = gating.clone();
    if settings.steps == 0 {
        return Ok(params);
    }
    if labeled.is_empty() {
        return Err(MopsError::Input("no labelled instructions".into()));
    }
    let averages = labeled
        .iter()
        .map(|s| injection_average(backbone, input_prompts, &s.tokens, GateSpan::All))
        .collect::<Result<Vec<_>>>()?;
    let adam = AdamConfig::with_lr(settings.lr);
    let mut moments = AdamMoments::default();
    let mut sampler = EpochSampler::new(labeled.len(), seed);
    for step in 0..settings.steps {
        let i = sampler.next_index();
        let trace = gate_traced(&params, &averages[i])?;
        let (loss, d_logits) = gate_target_loss(&trace.gate, labeled[i].label, cfg.prompts_per_expert);
        if !loss.is_finite() {
            return Err(MopsError::Diverged { step, detail: format!("gate loss {loss}") });
        }
        let mut grads = params.zeros_like();
        gate_backward_from_logits(&params, &trace, &d_logits, &mut grads);
        moments.update(
            &adam,
            vec![params.hidden.as_mut_slice(), params.output.as_mut_slice()],
            vec![grads.hidden.as_slice(), grads.output.as_slice()],
        );
    }
    Ok(params)
}

/// Writes one `task,p0..p{K-1}` row per gate vector.
pub fn write_gate_log(path: &Path, rows: &[(usize, GateVector)]) -> Result<()> {
    let k = rows.first().map_or(0, |(_, g)| g.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["task".to_string()];
    header.extend((0..k).map(|j| format!("p{j}")));
    w.write_record(&header)?;
    for (task, g) in rows {
        let mut rec = vec![task.to_string()];
        rec.extend(g.0.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_gate_log(path: &Path) -> Result<Vec<(usize, GateVector)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse_err = |detail: String| MopsError::Parse { path: path.display().to_string(), line: i + 2, detail };
        let task = rec.get(0).unwrap_or("").parse().map_err(|e| parse_err(format!("task: {e}")))?;
        let g = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| parse_err(format!("gate value: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push((task, GateVector(g)));
    }
    Ok(out)
}
