use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{backward_through, forward_plain, forward_prompted, Backbone, ModelConfig, TensorKind};
use crate::corpus::{shuffled_indices, Sample};
use crate::error::{MopsError, Result};
use crate::numerics::Matrix;
use crate::trainer::{loss_and_grad, next_token_targets, AdamConfig, AdamMoments};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainSettings {
    pub steps: usize,
    pub lr: f64,
    /// Linear ramp length in steps; 0 starts at full `lr`.
    #[serde(default)]
    pub warmup: usize,
    /// Cosine decay to zero over the steps after warmup.
    #[serde(default)]
    pub cosine: bool,
}

impl PretrainSettings {
    pub fn constant(steps: usize, lr: f64) -> Self {
        Self { steps, lr, warmup: 0, cosine: false }
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        if !self.cosine {
            return self.lr;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let t = (step - self.warmup) as f64 / span;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Cycles through `len` items in a fresh seeded permutation per epoch.
pub(crate) struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub(crate) fn new(len: usize, seed: u64) -> Self {
        Self { order: (0..len).collect(), pos: len, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub(crate) fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order = shuffled_indices(self.order.len(), &mut self.rng);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }
}

/// Trains every backbone weight (but not `P¹`) by next-token cross-entropy,
/// batch size one, Adam. Stands in for downloading a pretrained model.
pub fn pretrain_backbone(
    config: &ModelConfig,
    train: &[Sample],
    settings: PretrainSettings,
    seed: u64,
) -> Result<Backbone> {
    let mut backbone = Backbone::init(config, seed)?;
    if settings.steps == 0 {
        return Ok(backbone);
    }
    if train.is_empty() {
        return Err(MopsError::Input("no training samples".into()));
    }
    let mut moments = AdamMoments::default();
    let mut sampler = EpochSampler::new(train.len(), seed.wrapping_add(1));
    for step in 0..settings.steps {
        let adam = AdamConfig::with_lr(settings.lr_at(step));
        let sample = &train[sampler.next_index()];
        let trace = forward_plain(&backbone, &sample.tokens)?;
        let (report, d_logits) = loss_and_grad(trace.logits(), next_token_targets(&sample.tokens))?;
        if !report.nll.is_finite() {
            return Err(MopsError::Diverged { step, detail: format!("backbone loss {}", report.nll) });
        }
        let mut grads = backbone.zeros_like();
        backward_through(&backbone, &trace, &d_logits, 0, Some(&mut grads))?;
        let (params, g): (Vec<&mut [f64]>, Vec<&[f64]>) = backbone
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .filter(|((kind, _), _)| *kind != TensorKind::InputPrompts)
            .map(|((_, p), (_, g))| (p, g))
            .unzip();
        moments.update(&adam, params, g);
    }
    Ok(backbone)
}

/// Trains the first-layer prompts `P¹` against the frozen backbone, starting
/// from `backbone.input_prompts`. Only the returned matrix changes.
pub fn pretrain_input_prompts(
    backbone: &Backbone,
    train: &[Sample],
    settings: PretrainSettings,
    seed: u64,
) -> Result<Matrix> {
    let mut prompts = backbone.input_prompts.clone();
    if settings.steps == 0 || prompts.cols() == 0 {
        return Ok(prompts);
    }
    if train.is_empty() {
        return Err(MopsError::Input("no training samples".into()));
    }
    let k1 = prompts.cols();
    let mut moments = AdamMoments::default();
    let mut sampler = EpochSampler::new(train.len(), seed);
    for step in 0..settings.steps {
        let adam = AdamConfig::with_lr(settings.lr_at(step));
        let sample = &train[sampler.next_index()];
        let trace = forward_prompted(backbone, &prompts, &sample.tokens)?;
        let (report, d_logits) = loss_and_grad(trace.logits(), next_token_targets(&sample.tokens))?;
        if !report.nll.is_finite() {
            return Err(MopsError::Diverged { step, detail: format!("prompt loss {}", report.nll) });
        }
        let back = backward_through(backbone, &trace, &d_logits, 0, None)?;
        let grad = back.d_input.col_block(0, k1);
        moments.update(&adam, vec![prompts.as_mut_slice()], vec![grad.as_slice()]);
    }
    Ok(prompts)
}

/// Analytic gradient of the mean next-token loss with respect to `P¹`.
pub fn input_prompt_gradient(backbone: &Backbone, prompts: &Matrix, tokens: &[usize]) -> Result<Matrix> {
    let trace = forward_prompted(backbone, prompts, tokens)?;
    let (_, d_logits) = loss_and_grad(trace.logits(), next_token_targets(tokens))?;
    let back = backward_through(backbone, &trace, &d_logits, 0, None)?;
    Ok(back.d_input.col_block(0, prompts.cols()))
}
