use serde::{Deserialize, Serialize};

use crate::backbone::{backward_through, Backbone, ModelConfig};
use crate::error::{MopsError, Result};
use crate::mop::{gate_backward, GateMode, GatingParams, InjectedPrompts, MopTrace};
use crate::numerics::Matrix;
use crate::trainer::{loss_and_grad, AdamMoments, LossReport};

/// Everything MoP training is allowed to change. Backbone weights and the
/// first-layer prompts live elsewhere and are only ever borrowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainableState {
    pub injected: InjectedPrompts,
    pub gating: GatingParams,
    pub moments: AdamMoments,
    pub step: usize,
}

impl TrainableState {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            injected: InjectedPrompts::init(config, seed)?,
            gating: GatingParams::init(config, seed.wrapping_add(0x9e37))?,
            moments: AdamMoments::default(),
            step: 0,
        })
    }

    pub fn new(injected: InjectedPrompts, gating: GatingParams) -> Self {
        Self { injected, gating, moments: AdamMoments::default(), step: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MopGradients {
    pub prompts: Matrix,
    /// `None` when the gate did not scale anything.
    pub gating: Option<GatingParams>,
}

impl MopGradients {
    pub fn norm(&self) -> f64 {
        let mut sq: f64 = self.prompts.as_slice().iter().map(|v| v * v).sum();
        if let Some(g) = &self.gating {
            sq += g.hidden.as_slice().iter().chain(g.output.as_slice()).map(|v| v * v).sum::<f64>();
        }
        sq.sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.prompts.scale_in_place(factor);
        if let Some(g) = &mut self.gating {
            g.hidden.scale_in_place(factor);
            g.output.scale_in_place(factor);
        }
    }
}

/// Loss and exact gradients with respect to the injected prompts and the
/// gating params. The walk stops at the injection layer.
pub fn backward_mop(
    backbone: &Backbone,
    trace: &MopTrace,
    targets: &[usize],
    state: &TrainableState,
) -> Result<(LossReport, MopGradients)> {
    let k = state.injected.len();
    if trace.injected != k || trace.gate.gate.len() != state.gating.prompt_count() {
        return Err(MopsError::Shape(format!(
            "trace was built with {} injected prompts, state holds {k}",
            trace.injected
        )));
    }
    let (report, d_logits) = loss_and_grad(trace.logits(), targets)?;
    let back = backward_through(backbone, &trace.forward, &d_logits, trace.injection_index, None)?;
    let prompts = back.d_input.col_block(0, k);
    let gating = match trace.options.mode {
        GateMode::Learned => {
            let mut d_gate = vec![0.0; k];
            for ds in back.d_scales.iter().flatten() {
                for (acc, v) in d_gate.iter_mut().zip(ds) {
                    *acc += v;
                }
            }
            let mut grads = state.gating.zeros_like();
            gate_backward(&state.gating, &trace.gate, &d_gate, &mut grads);
            Some(grads)
        }
        GateMode::AllOnes | GateMode::Ungated => None,
    };
    Ok((report, MopGradients { prompts, gating }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mop::{forward_mop, GateSpan, MopOptions};
    use crate::numerics::relative_error;
    use crate::trainer::loss;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn perturbed(config: &ModelConfig, seed: u64, amp: f64) -> Backbone {
        let mut b = Backbone::init(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        for (_, t) in b.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-amp..amp);
            }
        }
        b
    }

    fn random_state(config: &ModelConfig, seed: u64) -> TrainableState {
        let mut s = TrainableState::init(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
        for v in s.injected.prompts.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in s.gating.output.as_mut_slice() {
            *v = rng.random_range(-0.5..0.5);
        }
        s
    }

    fn check_all_blocks(config: &ModelConfig, seed: u64, amp: f64) {
        let b = perturbed(config, seed, amp);
        let state = random_state(config, seed);
        let tokens = [2, 7, 1, 7, 3][..config.max_seq_len.min(5)].to_vec();
        let targets = tokens[1..].to_vec();
        let opts = MopOptions { mode: GateMode::Learned, span: GateSpan::All };
        let trace = forward_mop(&b, &b.input_prompts, &state.injected, &state.gating, &tokens, opts).unwrap();
        let (_, grads) = backward_mop(&b, &trace, &targets, &state).unwrap();
        let gating_grads = grads.gating.clone().unwrap();

        let objective = |s: &TrainableState| {
            let t = forward_mop(&b, &b.input_prompts, &s.injected, &s.gating, &tokens, opts).unwrap();
            loss(t.logits(), &targets).unwrap().nll
        };
        let eps = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fn pick(s: &mut TrainableState, block: usize, idx: usize) -> &mut f64 {
            match block {
                0 => &mut s.injected.prompts.as_mut_slice()[idx],
                1 => &mut s.gating.hidden.as_mut_slice()[idx],
                _ => &mut s.gating.output.as_mut_slice()[idx],
            }
        }
        let check = |block: usize, idx: usize, analytic: f64| {
            let mut hi = state.clone();
            let mut lo = state.clone();
            *pick(&mut hi, block, idx) += eps;
            *pick(&mut lo, block, idx) -= eps;
            let fd = (objective(&hi) - objective(&lo)) / (2.0 * eps);
            assert!(
                relative_error(analytic, fd) <= 1e-4 || (analytic - fd).abs() < 1e-9,
                "block {block} entry {idx}: analytic {analytic} vs numeric {fd}"
            );
        };
        for _ in 0..12 {
            let i = rng.random_range(0..grads.prompts.as_slice().len());
            check(0, i, grads.prompts.as_slice()[i]);
            let i = rng.random_range(0..gating_grads.hidden.as_slice().len());
            check(1, i, gating_grads.hidden.as_slice()[i]);
            let i = rng.random_range(0..gating_grads.output.as_slice().len());
            check(2, i, gating_grads.output.as_slice()[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences_toy() {
        check_all_blocks(&ModelConfig::toy(), 1, 0.15);
    }

    #[test]
    fn gradients_match_finite_differences_literal() {
        check_all_blocks(&ModelConfig::literal_tiny(), 2, 0.6);
    }

    #[test]
    fn gradients_match_finite_differences_keep_first_prompts_early_injection() {
        let mut config = ModelConfig::toy();
        config.layers = 4;
        config.injection_layer = 1;
        config.keep_first_layer_prompts = true;
        config.experts = 3;
        config.prompts_per_expert = 2;
        check_all_blocks(&config, 3, 0.15);
    }

    #[test]
    fn uniform_gate_gradient_is_a_scaled_baseline_gradient() {
        // Injecting at the top layer of a model without residuals or norms makes the
        // gated loss a function of the scaled prompts only.
        let mut config = ModelConfig::literal_tiny();
        config.injection_layer = config.layers;
        let b = perturbed(&config, 4, 0.6);
        let k = config.total_prompts();
        let mut state = random_state(&config, 4);
        state.gating.output = Matrix::zeros(k, config.d_gate);
        let tokens = [3, 5, 1, 5];
        let gated = MopOptions { mode: GateMode::Learned, span: GateSpan::All };
        let trace = forward_mop(&b, &b.input_prompts, &state.injected, &state.gating, &tokens, gated).unwrap();
        let (_, g) = backward_mop(&b, &trace, &tokens[1..], &state).unwrap();

        let mut shrunk = state.clone();
        shrunk.injected.prompts.scale_in_place(1.0 / k as f64);
        let plain = MopOptions { mode: GateMode::Ungated, span: GateSpan::All };
        let trace = forward_mop(&b, &b.input_prompts, &shrunk.injected, &shrunk.gating, &tokens, plain).unwrap();
        let (_, base) = backward_mop(&b, &trace, &tokens[1..], &shrunk).unwrap();
        assert!(base.gating.is_none());
        for (a, bv) in g.prompts.as_slice().iter().zip(base.prompts.as_slice()) {
            let want = bv / k as f64;
            assert!((a - want).abs() <= 1e-12 * (1.0 + want.abs()), "{a} vs {want}");
        }
    }

    #[test]
    fn saturated_loss_has_vanishing_gradients() {
        let config = ModelConfig::toy();
        let mut b = Backbone::init(&config, 5).unwrap();
        b.token_embedding = Matrix::zeros(config.d_model, config.vocab_size);
        b.token_embedding.set(0, 9, 1e3);
        b.position_embedding = Matrix::zeros(config.d_model, config.max_seq_len);
        let state = TrainableState::init(&config, 5).unwrap();
        let tokens = [9, 9, 9, 9];
        let trace =
            forward_mop(&b, &b.input_prompts, &state.injected, &state.gating, &tokens, MopOptions::default()).unwrap();
        let (report, g) = backward_mop(&b, &trace, &tokens[1..], &state).unwrap();
        assert!(report.nll < 1e-10);
        assert!(g.norm() < 1e-8, "{}", g.norm());
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let config = ModelConfig::toy();
        let b = Backbone::init(&config, 6).unwrap();
        let state = TrainableState::init(&config, 6).unwrap();
        let trace =
            forward_mop(&b, &b.input_prompts, &state.injected, &state.gating, &[2, 1, 3], MopOptions::default())
                .unwrap();
        let mut other = config.clone();
        other.experts = 2;
        let small = TrainableState::init(&other, 6).unwrap();
        assert!(backward_mop(&b, &trace, &[1, 3], &small).is_err());
    }
}
