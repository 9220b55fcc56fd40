//! The frozen decoder-only transformer.
//!
//! Weights are created by [`Backbone::init`] and then trained once by
//! [`pretrain_backbone`]; afterwards the only ways to get a different
//! backbone are compression (which returns a copy) and swapping in new
//! first-layer prompts via [`Backbone::with_input_prompts`].

mod forward;
mod io;
mod pretrain;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MopsError, Result};
use crate::numerics::{Mask, Matrix};

pub(crate) use forward::{
    backward_through, embed_tokens, head_forward, layer_forward, scale_leading_columns, validate_tokens,
};
pub use forward::{forward_plain, forward_prompted, ForwardTrace, HeadTrace, LayerTrace};
pub use io::{decode_backbone, encode_backbone, load_backbone, save_backbone};
pub(crate) use pretrain::EpochSampler;
pub use pretrain::{input_prompt_gradient, pretrain_backbone, pretrain_input_prompts, PretrainSettings};

pub(crate) const INIT_STD: f64 = 0.02;
const FREE_PROMPT_INIT_STD: f64 = 0.3;
pub(crate) const NORM_EPS: f64 = 1e-5;

/// Architecture and prompt-layout hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of transformer layers `L`.
    pub layers: usize,
    pub heads: usize,
    /// Token embedding width `d_t`.
    pub d_model: usize,
    pub d_head: usize,
    /// Attention output width `d_o`; must equal `heads * d_head`.
    pub d_attn_out: usize,
    /// Feed-forward hidden width `d_1`.
    pub d_ff: usize,
    /// Gating MLP hidden width `d_g`.
    pub d_gate: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// 1-based layer at which expert prompts are injected.
    pub injection_layer: usize,
    pub experts: usize,
    pub prompts_per_expert: usize,
    /// Frozen first-layer prompts `K1`.
    pub input_prompts: usize,
    /// Residual connections around attention and feed-forward blocks.
    #[serde(default = "default_true")]
    pub residual: bool,
    /// Pre-block RMS normalisation plus a final norm before the head.
    #[serde(default = "default_true")]
    pub norm: bool,
    /// Keep the propagated first-layer prompt columns (unscaled) after the
    /// injection layer instead of replacing them.
    #[serde(default)]
    pub keep_first_layer_prompts: bool,
    /// RMS-rescale prompt columns like token columns. Off by default: prompt
    /// columns then only get the norm gain, so their trained magnitude (and
    /// the gate scaling it) reaches the attention unchanged.
    #[serde(default)]
    pub prompt_norm: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// The desk-scale default: 8 layers, 4 heads, width 64, 4 experts of 4
    /// prompts injected at layer 3.
    pub fn toy() -> Self {
        Self {
            layers: 8,
            heads: 4,
            d_model: 64,
            d_head: 16,
            d_attn_out: 64,
            d_ff: 128,
            d_gate: 256,
            vocab_size: 256,
            max_seq_len: 16,
            injection_layer: 3,
            experts: 4,
            prompts_per_expert: 4,
            input_prompts: 4,
            residual: true,
            norm: true,
            keep_first_layer_prompts: false,
            prompt_norm: false,
        }
    }

    /// A very small configuration for gradient checks and hand-computed
    /// cases: no residuals, no norms, just attention and feed-forward maps.
    pub fn literal_tiny() -> Self {
        Self {
            layers: 3,
            heads: 2,
            d_model: 6,
            d_head: 3,
            d_attn_out: 6,
            d_ff: 8,
            d_gate: 5,
            vocab_size: 12,
            max_seq_len: 8,
            injection_layer: 2,
            experts: 2,
            prompts_per_expert: 2,
            input_prompts: 2,
            residual: false,
            norm: false,
            keep_first_layer_prompts: false,
            prompt_norm: false,
        }
    }

    /// Leading columns that the in-layer norms leave unrescaled.
    pub fn fixed_norm_columns(&self, prompt_cols: usize) -> usize {
        if self.prompt_norm {
            0
        } else {
            prompt_cols
        }
    }

    /// Init std for `P¹` and the injected prompts. Prompts the norm leaves
    /// alone start at a fraction of the unit token-column RMS; normalised
    /// prompts start at embedding scale like every other weight.
    pub fn prompt_init_std(&self) -> f64 {
        if self.prompt_norm {
            INIT_STD
        } else {
            FREE_PROMPT_INIT_STD
        }
    }

    /// Total injected prompt count `K = E * m`.
    pub fn total_prompts(&self) -> usize {
        self.experts * self.prompts_per_expert
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_attn_out", self.d_attn_out),
            ("d_ff", self.d_ff),
            ("d_gate", self.d_gate),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(MopsError::Config(format!("{name} must be positive")));
            }
        }
        if self.injection_layer < 1 || self.injection_layer > self.layers {
            return Err(MopsError::Config(format!(
                "injection_layer must lie in 1..={}, got {}",
                self.layers, self.injection_layer
            )));
        }
        if self.d_attn_out != self.heads * self.d_head {
            return Err(MopsError::Config(format!(
                "d_attn_out ({}) must equal heads * d_head ({})",
                self.d_attn_out,
                self.heads * self.d_head
            )));
        }
        if self.residual && self.d_attn_out != self.d_model {
            return Err(MopsError::Config("residual connections need d_attn_out == d_model".into()));
        }
        if self.experts == 0 && self.prompts_per_expert != 0 {
            return Err(MopsError::Config("prompts_per_expert set without experts".into()));
        }
        Ok(())
    }
}

/// One transformer layer. Per-head projections are stacked: head `h` owns
/// rows `h * d_head .. (h + 1) * d_head` of `query`, `key` and `value`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub output: Matrix,
    pub ff1: Matrix,
    pub ff2: Matrix,
    pub attn_norm: Vec<f64>,
    pub ffn_norm: Vec<f64>,
}

/// Which role a weight tensor plays. Compression targets only the attention
/// and feed-forward projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorKind {
    TokenEmbedding,
    PositionEmbedding,
    Query,
    Key,
    Value,
    AttnOutput,
    Ffn1,
    Ffn2,
    Norm,
    InputPrompts,
}

impl TensorKind {
    pub fn is_projection(self) -> bool {
        matches!(
            self,
            TensorKind::Query
                | TensorKind::Key
                | TensorKind::Value
                | TensorKind::AttnOutput
                | TensorKind::Ffn1
                | TensorKind::Ffn2
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: ModelConfig,
    /// `d_t × vocab`; also the (transposed) output head.
    pub token_embedding: Matrix,
    /// `d_t × max_seq_len`, added to token columns only.
    pub position_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    /// Frozen first-layer prompts `P¹`, `d_t × K1`.
    pub input_prompts: Matrix,
}

impl Backbone {
    /// Seeded Gaussian initialisation (std 0.02); norm gains start at one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut gaussian = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| normal.sample(&mut rng));
        let (dt, hd) = (config.d_model, config.heads * config.d_head);
        let token_embedding = gaussian(dt, config.vocab_size);
        let position_embedding = gaussian(dt, config.max_seq_len);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerWeights {
                query: gaussian(hd, dt),
                key: gaussian(hd, dt),
                value: gaussian(hd, dt),
                output: gaussian(config.d_attn_out, hd),
                ff1: gaussian(config.d_ff, config.d_attn_out),
                ff2: gaussian(dt, config.d_ff),
                attn_norm: vec![1.0; dt],
                ffn_norm: vec![1.0; dt],
            });
        }
        let mut input_prompts = gaussian(dt, config.input_prompts);
        input_prompts.scale_in_place(config.prompt_init_std() / INIT_STD);
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            layers,
            final_norm: vec![1.0; dt],
            input_prompts,
        })
    }

    /// Same structure, every entry zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn with_input_prompts(&self, prompts: Matrix) -> Result<Self> {
        if prompts.shape() != self.input_prompts.shape() {
            return Err(MopsError::Shape(format!(
                "input prompts must be {:?}, got {:?}",
                self.input_prompts.shape(),
                prompts.shape()
            )));
        }
        let mut out = self.clone();
        out.input_prompts = prompts;
        Ok(out)
    }

    /// Every tensor in declaration order: embeddings, then per layer the
    /// per-head `W_q, W_k, W_v`, `W_o`, `W_ff1`, `W_ff2` and the two norm
    /// gains, then the final norm and `P¹`.
    pub fn tensors(&self) -> Vec<(TensorKind, &[f64])> {
        let per_head = self.config.d_head * self.config.d_model;
        let mut out: Vec<(TensorKind, &[f64])> = vec![
            (TensorKind::TokenEmbedding, self.token_embedding.as_slice()),
            (TensorKind::PositionEmbedding, self.position_embedding.as_slice()),
        ];
        for layer in &self.layers {
            let heads = layer
                .query
                .as_slice()
                .chunks(per_head)
                .zip(layer.key.as_slice().chunks(per_head))
                .zip(layer.value.as_slice().chunks(per_head));
            for ((q, k), v) in heads {
                out.push((TensorKind::Query, q));
                out.push((TensorKind::Key, k));
                out.push((TensorKind::Value, v));
            }
            out.push((TensorKind::AttnOutput, layer.output.as_slice()));
            out.push((TensorKind::Ffn1, layer.ff1.as_slice()));
            out.push((TensorKind::Ffn2, layer.ff2.as_slice()));
            out.push((TensorKind::Norm, &layer.attn_norm));
            out.push((TensorKind::Norm, &layer.ffn_norm));
        }
        out.push((TensorKind::Norm, &self.final_norm));
        out.push((TensorKind::InputPrompts, self.input_prompts.as_slice()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(TensorKind, &mut [f64])> {
        let per_head = self.config.d_head * self.config.d_model;
        let mut out: Vec<(TensorKind, &mut [f64])> = vec![
            (TensorKind::TokenEmbedding, self.token_embedding.as_mut_slice()),
            (TensorKind::PositionEmbedding, self.position_embedding.as_mut_slice()),
        ];
        for layer in &mut self.layers {
            let heads = layer
                .query
                .as_mut_slice()
                .chunks_mut(per_head)
                .zip(layer.key.as_mut_slice().chunks_mut(per_head))
                .zip(layer.value.as_mut_slice().chunks_mut(per_head));
            for ((q, k), v) in heads {
                out.push((TensorKind::Query, q));
                out.push((TensorKind::Key, k));
                out.push((TensorKind::Value, v));
            }
            out.push((TensorKind::AttnOutput, layer.output.as_mut_slice()));
            out.push((TensorKind::Ffn1, layer.ff1.as_mut_slice()));
            out.push((TensorKind::Ffn2, layer.ff2.as_mut_slice()));
            out.push((TensorKind::Norm, &mut layer.attn_norm));
            out.push((TensorKind::Norm, &mut layer.ffn_norm));
        }
        out.push((TensorKind::Norm, &mut self.final_norm));
        out.push((TensorKind::InputPrompts, self.input_prompts.as_mut_slice()));
        out
    }

    /// Per-tensor row length, used by N:M pruning. Norm gains and prompts
    /// are reported as a single row.
    pub fn tensor_row_lengths(&self) -> Vec<usize> {
        let c = &self.config;
        let mut out = vec![c.vocab_size, c.max_seq_len];
        for _ in 0..c.layers {
            for _ in 0..c.heads {
                out.extend([c.d_model; 3]);
            }
            out.push(c.heads * c.d_head);
            out.push(c.d_attn_out);
            out.push(c.d_ff);
            out.push(c.d_model);
            out.push(c.d_model);
        }
        out.push(c.d_model);
        out.push(c.input_prompts.max(1));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Byte-level fingerprint used to assert the frozen contract.
    pub fn bit_pattern(&self) -> Vec<u64> {
        self.tensors().iter().flat_map(|(_, t)| t.iter().map(|v| v.to_bits())).collect()
    }
}

/// The attention mask for `K` prompt columns followed by `n` tokens.
pub fn build_extended_mask(n: usize, prompts: usize) -> Mask {
    Mask::extended(n, prompts)
}
