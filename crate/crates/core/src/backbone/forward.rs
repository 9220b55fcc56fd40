//! Layer forward pass with retained activations, and the matching manual
//! backward pass.
//!
//! With `residual` and `norm` switched off a layer computes exactly
//!
//! ```text
//! Q = W_q B̂,  K = W_k B̂,  A = softmax(mask(Qᵀ K / √d_h)),  V = (W_v B̂) Aᵀ
//! O = W_o [V¹; …; Vᴴ],   out = W_ff2 relu(W_ff1 O)
//! ```
//!
//! where `B̂` is the layer input with its first prompt columns optionally
//! multiplied by a gate vector. Rows of `A` are query positions, so each row
//! is a distribution over visible keys. With the flags on, the usual
//! pre-norm residual block wraps the same computation and the gate scales the
//! normalised prompt columns that feed the projections.

use crate::backbone::{Backbone, LayerWeights, ModelConfig, NORM_EPS};
use crate::error::{MopsError, Result};
use crate::numerics::{
    concat_columns, masked_softmax_rows, matmul_nt_unchecked, matmul_tn_unchecked, matmul_unchecked, Mask, Matrix,
};

/// Everything one layer computed on the way forward.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Layer input `B^ℓ`, `d_t × (K + n)`.
    pub input: Matrix,
    pub prompt_cols: usize,
    pub scale: Option<Vec<f64>>,
    /// Input after the pre-attention norm (identical to `input` without norms).
    pub normed: Matrix,
    /// `B̂^ℓ`: what the projections actually see.
    pub projected: Matrix,
    pub queries: Matrix,
    pub keys: Matrix,
    /// `W_v B̂` before mixing by attention.
    pub values: Matrix,
    /// `A^{h,ℓ}` per head, `(K + n) × (K + n)`.
    pub attention: Vec<Matrix>,
    /// Stacked head outputs `[V¹; …; Vᴴ]`.
    pub heads: Matrix,
    /// `O^ℓ`.
    pub attn_out: Matrix,
    /// Stream after the attention block (`O` itself without residuals).
    pub mid: Matrix,
    pub ffn_in: Matrix,
    /// `W_ff1 · ffn_in`, before the ReLU.
    pub ffn_pre: Matrix,
    pub output: Matrix,
    attn_inv_rms: Vec<f64>,
    ffn_inv_rms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    /// Token columns of the last layer output.
    pub hidden: Matrix,
    pub normed: Matrix,
    /// `vocab × n`, one column of logits per token position.
    pub logits: Matrix,
    inv_rms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    pub layers: Vec<LayerTrace>,
    pub head: HeadTrace,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        &self.head.logits
    }
}

pub(crate) fn validate_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(MopsError::Input("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(MopsError::Input(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(MopsError::Input(format!("token id {bad} out of range for vocabulary of {}", config.vocab_size)));
    }
    Ok(())
}

/// `X¹`: token embedding plus learned position embedding, `d_t × n`.
pub(crate) fn embed_tokens(backbone: &Backbone, tokens: &[usize]) -> Matrix {
    let dt = backbone.config.d_model;
    Matrix::from_fn(dt, tokens.len(), |r, i| {
        backbone.token_embedding.get(r, tokens[i]) + backbone.position_embedding.get(r, i)
    })
}

/// The first `fixed` columns keep their magnitude: only the gain applies.
fn rms_norm(x: &Matrix, gain: &[f64], fixed: usize) -> (Matrix, Vec<f64>) {
    let (d, c) = x.shape();
    let mut inv = vec![1.0; c];
    for (j, slot) in inv.iter_mut().enumerate().skip(fixed) {
        let mut ms = 0.0;
        for r in 0..d {
            let v = x.get(r, j);
            ms += v * v;
        }
        *slot = 1.0 / (ms / d as f64 + NORM_EPS).sqrt();
    }
    let y = Matrix::from_fn(d, c, |r, j| x.get(r, j) * inv[j] * gain[r]);
    (y, inv)
}

/// Returns `dx`; accumulates the gain gradient when asked.
fn rms_norm_backward(
    dy: &Matrix,
    x: &Matrix,
    inv: &[f64],
    gain: &[f64],
    dgain: Option<&mut Vec<f64>>,
    fixed: usize,
) -> Matrix {
    let (d, c) = x.shape();
    let mut dx = Matrix::zeros(d, c);
    if let Some(dg) = dgain {
        for r in 0..d {
            for j in 0..c {
                dg[r] += dy.get(r, j) * x.get(r, j) * inv[j];
            }
        }
    }
    for j in 0..c {
        let mut dot = 0.0;
        for r in 0..d {
            dot += dy.get(r, j) * gain[r] * x.get(r, j);
        }
        let coef = if j < fixed { 0.0 } else { inv[j] * inv[j] * inv[j] * dot / d as f64 };
        for r in 0..d {
            dx.set(r, j, inv[j] * gain[r] * dy.get(r, j) - coef * x.get(r, j));
        }
    }
    dx
}

/// Multiplies the first `scale.len()` columns by the matching scale entry.
pub(crate) fn scale_leading_columns(m: &Matrix, scale: &[f64]) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        for (v, s) in out.row_mut(r).iter_mut().zip(scale) {
            *v *= s;
        }
    }
    out
}

pub(crate) fn layer_forward(
    config: &ModelConfig,
    w: &LayerWeights,
    input: Matrix,
    prompt_cols: usize,
    scale: Option<&[f64]>,
) -> LayerTrace {
    let cols = input.cols();
    debug_assert_eq!(input.rows(), config.d_model);
    debug_assert!(prompt_cols <= cols);
    debug_assert!(scale.is_none_or(|s| s.len() <= prompt_cols));
    let dh = config.d_head;
    let mask = Mask::extended(cols - prompt_cols, prompt_cols);

    let fixed = config.fixed_norm_columns(prompt_cols);
    let (normed, attn_inv_rms) =
        if config.norm { rms_norm(&input, &w.attn_norm, fixed) } else { (input.clone(), Vec::new()) };
    let projected = match scale {
        Some(s) => scale_leading_columns(&normed, s),
        None => normed.clone(),
    };
    let queries = matmul_unchecked(&w.query, &projected);
    let keys = matmul_unchecked(&w.key, &projected);
    let values = matmul_unchecked(&w.value, &projected);

    let temperature = 1.0 / (dh as f64).sqrt();
    let mut heads = Matrix::zeros(config.heads * dh, cols);
    let mut attention = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let q = queries.row_block(h * dh, (h + 1) * dh);
        let k = keys.row_block(h * dh, (h + 1) * dh);
        let v = values.row_block(h * dh, (h + 1) * dh);
        let mut logits = matmul_tn_unchecked(&q, &k);
        logits.scale_in_place(temperature);
        let a = masked_softmax_rows(&logits, &mask).expect("every row sees its own position");
        debug_assert_eq!(a.shape(), (cols, cols));
        let mixed = matmul_nt_unchecked(&v, &a);
        for r in 0..dh {
            heads.row_mut(h * dh + r).copy_from_slice(mixed.row(r));
        }
        attention.push(a);
    }
    let attn_out = matmul_unchecked(&w.output, &heads);
    debug_assert_eq!(attn_out.shape(), (config.d_attn_out, cols));
    let mid = if config.residual { input.add(&attn_out) } else { attn_out.clone() };
    let (ffn_in, ffn_inv_rms) = if config.norm { rms_norm(&mid, &w.ffn_norm, 0) } else { (mid.clone(), Vec::new()) };
    let ffn_pre = matmul_unchecked(&w.ff1, &ffn_in);
    let activated = ffn_pre.map(|v| v.max(0.0));
    let ffn_out = matmul_unchecked(&w.ff2, &activated);
    let output = if config.residual { mid.add(&ffn_out) } else { ffn_out };
    debug_assert_eq!(output.shape(), (config.d_model, cols));

    LayerTrace {
        input,
        prompt_cols,
        scale: scale.map(<[f64]>::to_vec),
        normed,
        projected,
        queries,
        keys,
        values,
        attention,
        heads,
        attn_out,
        mid,
        ffn_in,
        ffn_pre,
        output,
        attn_inv_rms,
        ffn_inv_rms,
    }
}

/// Gradient of the loss with respect to the layer input, plus the gradient
/// with respect to the gate scale when one was applied. Weight gradients are
/// accumulated into `grads` when it is provided.
pub(crate) fn layer_backward(
    config: &ModelConfig,
    w: &LayerWeights,
    t: &LayerTrace,
    d_out: &Matrix,
    mut grads: Option<&mut LayerWeights>,
) -> (Matrix, Option<Vec<f64>>) {
    let cols = t.input.cols();
    let dh = config.d_head;

    // Feed-forward block.
    let d_ffn_out = d_out;
    let activated = t.ffn_pre.map(|v| v.max(0.0));
    let mut d_pre = matmul_tn_unchecked(&w.ff2, d_ffn_out);
    for (d, &p) in d_pre.as_mut_slice().iter_mut().zip(t.ffn_pre.as_slice()) {
        if p <= 0.0 {
            *d = 0.0;
        }
    }
    let d_ffn_in = matmul_tn_unchecked(&w.ff1, &d_pre);
    if let Some(g) = grads.as_deref_mut() {
        g.ff2.add_assign(&matmul_nt_unchecked(d_ffn_out, &activated));
        g.ff1.add_assign(&matmul_nt_unchecked(&d_pre, &t.ffn_in));
    }
    let mut d_mid = if config.norm {
        rms_norm_backward(
            &d_ffn_in,
            &t.mid,
            &t.ffn_inv_rms,
            &w.ffn_norm,
            grads.as_deref_mut().map(|g| &mut g.ffn_norm),
            0,
        )
    } else {
        d_ffn_in
    };
    if config.residual {
        d_mid.add_assign(d_out);
    }

    // Attention block.
    let d_attn_out = &d_mid;
    let d_heads = matmul_tn_unchecked(&w.output, d_attn_out);
    if let Some(g) = grads.as_deref_mut() {
        g.output.add_assign(&matmul_nt_unchecked(d_attn_out, &t.heads));
    }
    let temperature = 1.0 / (dh as f64).sqrt();
    let hd = config.heads * dh;
    let mut dq = Matrix::zeros(hd, cols);
    let mut dk = Matrix::zeros(hd, cols);
    let mut dv = Matrix::zeros(hd, cols);
    for h in 0..config.heads {
        let a = &t.attention[h];
        let dy = d_heads.row_block(h * dh, (h + 1) * dh);
        let q = t.queries.row_block(h * dh, (h + 1) * dh);
        let k = t.keys.row_block(h * dh, (h + 1) * dh);
        let v = t.values.row_block(h * dh, (h + 1) * dh);
        let dv_h = matmul_unchecked(&dy, a);
        let d_attn = matmul_tn_unchecked(&dy, &v);
        let mut d_logits = Matrix::zeros(cols, cols);
        for i in 0..cols {
            let arow = a.row(i);
            let drow = d_attn.row(i);
            let inner: f64 = arow.iter().zip(drow).map(|(x, y)| x * y).sum();
            for (o, (&aij, &dij)) in d_logits.row_mut(i).iter_mut().zip(arow.iter().zip(drow)) {
                *o = aij * (dij - inner) * temperature;
            }
        }
        let dq_h = matmul_nt_unchecked(&k, &d_logits);
        let dk_h = matmul_unchecked(&q, &d_logits);
        for r in 0..dh {
            dq.row_mut(h * dh + r).copy_from_slice(dq_h.row(r));
            dk.row_mut(h * dh + r).copy_from_slice(dk_h.row(r));
            dv.row_mut(h * dh + r).copy_from_slice(dv_h.row(r));
        }
    }
    let mut d_projected = matmul_tn_unchecked(&w.query, &dq);
    d_projected.add_assign(&matmul_tn_unchecked(&w.key, &dk));
    d_projected.add_assign(&matmul_tn_unchecked(&w.value, &dv));
    if let Some(g) = grads.as_deref_mut() {
        g.query.add_assign(&matmul_nt_unchecked(&dq, &t.projected));
        g.key.add_assign(&matmul_nt_unchecked(&dk, &t.projected));
        g.value.add_assign(&matmul_nt_unchecked(&dv, &t.projected));
    }

    let (d_normed, d_scale) = match &t.scale {
        Some(s) => {
            let mut ds = vec![0.0; s.len()];
            for r in 0..t.normed.rows() {
                let drow = d_projected.row(r);
                let nrow = t.normed.row(r);
                for (j, slot) in ds.iter_mut().enumerate() {
                    *slot += drow[j] * nrow[j];
                }
            }
            (scale_leading_columns(&d_projected, s), Some(ds))
        }
        None => (d_projected, None),
    };

    let mut d_input = if config.norm {
        rms_norm_backward(
            &d_normed,
            &t.input,
            &t.attn_inv_rms,
            &w.attn_norm,
            grads.map(|g| &mut g.attn_norm),
            config.fixed_norm_columns(t.prompt_cols),
        )
    } else {
        d_normed
    };
    if config.residual {
        d_input.add_assign(&d_mid);
    }
    (d_input, d_scale)
}

/// Final norm and tied output head applied to the token columns of the last
/// layer output.
pub(crate) fn head_forward(backbone: &Backbone, last: &Matrix, prompt_cols: usize) -> HeadTrace {
    let hidden = last.col_block(prompt_cols, last.cols());
    let (normed, inv_rms) =
        if backbone.config.norm { rms_norm(&hidden, &backbone.final_norm, 0) } else { (hidden.clone(), Vec::new()) };
    let logits = matmul_tn_unchecked(&backbone.token_embedding, &normed);
    HeadTrace { hidden, normed, logits, inv_rms }
}

pub(crate) struct BackwardResult {
    /// Gradient with respect to the input of the lowest layer visited.
    pub d_input: Matrix,
    /// Gate-scale gradient per layer (`None` where no scale was applied or
    /// the layer was not visited).
    pub d_scales: Vec<Option<Vec<f64>>>,
}

/// Backpropagates `d_logits` from the head down to (and including) layer
/// index `stop_layer` (0-based). With `grads`, weight gradients are
/// accumulated, including the embeddings when the walk reaches layer 0.
pub(crate) fn backward_through(
    backbone: &Backbone,
    trace: &ForwardTrace,
    d_logits: &Matrix,
    stop_layer: usize,
    mut grads: Option<&mut Backbone>,
) -> Result<BackwardResult> {
    let cfg = &backbone.config;
    let head = &trace.head;
    if d_logits.shape() != head.logits.shape() {
        return Err(MopsError::Shape(format!(
            "logit gradient {:?} does not match logits {:?}",
            d_logits.shape(),
            head.logits.shape()
        )));
    }
    let d_normed = matmul_unchecked(&backbone.token_embedding, d_logits);
    if let Some(g) = grads.as_deref_mut() {
        g.token_embedding.add_assign(&matmul_nt_unchecked(&head.normed, d_logits));
    }
    let d_hidden = if cfg.norm {
        rms_norm_backward(
            &d_normed,
            &head.hidden,
            &head.inv_rms,
            &backbone.final_norm,
            grads.as_deref_mut().map(|g| &mut g.final_norm),
            0,
        )
    } else {
        d_normed
    };
    let last = trace.layers.last().expect("at least one layer");
    let prompt_cols = last.prompt_cols;
    let mut d = concat_columns(&Matrix::zeros(cfg.d_model, prompt_cols), &d_hidden)?;

    let mut d_scales = vec![None; trace.layers.len()];
    for idx in (stop_layer..trace.layers.len()).rev() {
        let t = &trace.layers[idx];
        if d.shape() != t.output.shape() {
            return Err(MopsError::Shape(format!(
                "cannot backpropagate across the column layout change below layer {}",
                idx + 1
            )));
        }
        let layer_grads = grads.as_deref_mut().map(|g| &mut g.layers[idx]);
        let (d_in, ds) = layer_backward(cfg, &backbone.layers[idx], t, &d, layer_grads);
        d_scales[idx] = ds;
        d = d_in;
    }

    if stop_layer == 0 {
        if let Some(g) = grads {
            let first = &trace.layers[0];
            let k1 = first.prompt_cols;
            for (i, &tok) in trace.tokens.iter().enumerate() {
                for r in 0..cfg.d_model {
                    let v = d.get(r, k1 + i);
                    let e = g.token_embedding.get(r, tok);
                    g.token_embedding.set(r, tok, e + v);
                    let p = g.position_embedding.get(r, i);
                    g.position_embedding.set(r, i, p + v);
                }
            }
            if k1 == g.input_prompts.cols() {
                g.input_prompts.add_assign(&d.col_block(0, k1));
            }
        }
    }
    Ok(BackwardResult { d_input: d, d_scales })
}

/// Forward pass with first-layer prompts `P¹` prepended to the tokens. All
/// layers carry the `K1 + n` columns jointly.
pub fn forward_prompted(backbone: &Backbone, prompts: &Matrix, tokens: &[usize]) -> Result<ForwardTrace> {
    let cfg = &backbone.config;
    validate_tokens(cfg, tokens)?;
    if prompts.rows() != cfg.d_model {
        return Err(MopsError::Shape(format!("prompts must have {} rows, got {}", cfg.d_model, prompts.rows())));
    }
    let k1 = prompts.cols();
    let mut stream = concat_columns(prompts, &embed_tokens(backbone, tokens))?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for w in &backbone.layers {
        let t = layer_forward(cfg, w, stream, k1, None);
        stream = t.output.clone();
        layers.push(t);
    }
    let head = head_forward(backbone, &stream, k1);
    Ok(ForwardTrace { tokens: tokens.to_vec(), layers, head })
}

/// Forward pass with the plain causal mask and no prompts.
pub fn forward_plain(backbone: &Backbone, tokens: &[usize]) -> Result<ForwardTrace> {
    forward_prompted(backbone, &Matrix::zeros(backbone.config.d_model, 0), tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_entries;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trained_like(config: &ModelConfig, seed: u64) -> Backbone {
        // Larger weights than the init so that gradients are not vanishingly
        // small in literal (no-residual) mode.
        let mut b = Backbone::init(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for (_, t) in b.tensors_mut() {
            for v in t.iter_mut() {
                *v = rng.random_range(-0.6..0.6);
            }
        }
        b
    }

    fn nll(logits: &Matrix, targets: &[usize]) -> f64 {
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let col = logits.column_values(i);
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - col[t];
        }
        total / targets.len() as f64
    }

    fn nll_grad(logits: &Matrix, targets: &[usize]) -> Matrix {
        let mut g = Matrix::zeros(logits.rows(), logits.cols());
        for (i, &t) in targets.iter().enumerate() {
            let col = crate::numerics::softmax(&logits.column_values(i));
            for (r, p) in col.into_iter().enumerate() {
                let y = if r == t { 1.0 } else { 0.0 };
                g.set(r, i, (p - y) / targets.len() as f64);
            }
        }
        g
    }

    /// Hand-rolled single layer with d = 2: one head, identity projections,
    /// no norms or residuals.
    #[test]
    fn one_layer_identity_weights_hand_computed() {
        let config = ModelConfig {
            layers: 1,
            heads: 1,
            d_model: 2,
            d_head: 2,
            d_attn_out: 2,
            d_ff: 2,
            d_gate: 2,
            vocab_size: 2,
            max_seq_len: 2,
            injection_layer: 1,
            experts: 0,
            prompts_per_expert: 0,
            input_prompts: 0,
            residual: false,
            norm: false,
            keep_first_layer_prompts: false,
            prompt_norm: false,
        };
        let mut b = Backbone::init(&config, 0).unwrap();
        let id = Matrix::identity(2);
        let l = &mut b.layers[0];
        l.query = id.clone();
        l.key = id.clone();
        l.value = id.clone();
        l.output = id.clone();
        l.ff1 = id.clone();
        l.ff2 = id.clone();
        b.token_embedding = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        b.position_embedding = Matrix::zeros(2, 2);

        let trace = forward_plain(&b, &[0, 1]).unwrap();
        // Position 0 sees only itself: V col 0 = e0. Position 1 sees e0, e1
        // with logits (e1·e0, e1·e1)/√2 = (0, 1/√2).
        let w1 = (1.0f64 / 2f64.sqrt()).exp();
        let (a10, a11) = (1.0 / (1.0 + w1), w1 / (1.0 + w1));
        // relu keeps the non-negative mixture; the head is Eᵀ = I.
        let expected = Matrix::from_rows(&[&[1.0, a10], &[0.0, a11]]);
        assert!(trace.logits().max_abs_diff(&expected) < 1e-15);
        assert!((trace.layers[0].attention[0].get(1, 0) - a10).abs() < 1e-15);
    }

    #[test]
    fn deterministic_traces() {
        let b = trained_like(&ModelConfig::toy(), 1);
        let a = forward_plain(&b, &[3, 4, 5, 6]).unwrap();
        let c = forward_plain(&b, &[3, 4, 5, 6]).unwrap();
        assert_eq!(a.logits(), c.logits());
        assert_eq!(a.layers[3].attention[1], c.layers[3].attention[1]);
    }

    #[test]
    fn input_validation() {
        let b = Backbone::init(&ModelConfig::literal_tiny(), 0).unwrap();
        assert!(forward_plain(&b, &[]).is_err());
        assert!(forward_plain(&b, &[12]).is_err());
        assert!(forward_plain(&b, &[1; 9]).is_err());
    }

    #[test]
    fn empty_prompts_match_plain_bit_exactly() {
        let b = trained_like(&ModelConfig::toy(), 2);
        let plain = forward_plain(&b, &[9, 8, 7]).unwrap();
        let prompted = forward_prompted(&b, &Matrix::zeros(64, 0), &[9, 8, 7]).unwrap();
        assert_eq!(plain.logits(), prompted.logits());
    }

    #[test]
    fn prompted_shapes_follow_the_extended_layout() {
        let b = trained_like(&ModelConfig::toy(), 3);
        let trace = forward_prompted(&b, &b.input_prompts, &[1, 2, 3, 4, 5]).unwrap();
        for l in &trace.layers {
            assert_eq!(l.input.shape(), (64, 9));
            for a in &l.attention {
                assert_eq!(a.shape(), (9, 9));
            }
            assert_eq!(l.heads.shape(), (64, 9));
            assert_eq!(l.attn_out.shape(), (64, 9));
            assert_eq!(l.ffn_pre.shape(), (128, 9));
        }
        assert_eq!(trace.logits().shape(), (256, 5));
    }

    #[test]
    fn prompts_influence_token_logits() {
        let b = trained_like(&ModelConfig::toy(), 4);
        let base = forward_prompted(&b, &b.input_prompts, &[1, 2, 3]).unwrap();
        let mut p = b.input_prompts.clone();
        p.set(5, 1, p.get(5, 1) + 0.5);
        let moved = forward_prompted(&b, &p, &[1, 2, 3]).unwrap();
        assert!(base.logits().max_abs_diff(moved.logits()) > 1e-9);
    }

    #[test]
    fn future_tokens_never_change_earlier_logits() {
        for config in [ModelConfig::toy(), ModelConfig::literal_tiny()] {
            let b = trained_like(&config, 5);
            let a = forward_prompted(&b, &b.input_prompts, &[1, 2, 3, 4, 5]).unwrap();
            let c = forward_prompted(&b, &b.input_prompts, &[1, 2, 3, 10, 0]).unwrap();
            for pos in 0..3 {
                assert_eq!(a.logits().column_values(pos), c.logits().column_values(pos));
            }
            assert_ne!(a.logits().column_values(3), c.logits().column_values(3));
        }
    }

    fn check_input_prompt_gradient(config: &ModelConfig, seed: u64) {
        let b = trained_like(config, seed);
        let tokens = [1, 5, 2, 7, 3];
        let targets = [5, 2, 7, 3];
        let trace = forward_prompted(&b, &b.input_prompts, &tokens).unwrap();
        let d_logits = nll_grad(&trace.logits().col_block(0, 4), &targets);
        let d_full = concat_columns(&d_logits, &Matrix::zeros(config.vocab_size, 1)).unwrap();
        let res = backward_through(&b, &trace, &d_full, 0, None).unwrap();
        let analytic = res.d_input.col_block(0, config.input_prompts);
        let mut f = |p: &Matrix| {
            let t = forward_prompted(&b, p, &tokens).unwrap();
            nll(&t.logits().col_block(0, 4), &targets)
        };
        let n = b.input_prompts.as_slice().len();
        let numeric = finite_difference_entries(&mut f, &b.input_prompts, 1e-5, 0..n).unwrap();
        for (idx, g) in numeric {
            let a = analytic.as_slice()[idx];
            assert!(
                crate::numerics::relative_error(a, g) < 1e-4 || (a - g).abs() < 1e-9,
                "entry {idx}: analytic {a} vs numeric {g}"
            );
        }
    }

    #[test]
    fn input_prompt_gradient_literal_mode() {
        check_input_prompt_gradient(&ModelConfig::literal_tiny(), 11);
    }

    #[test]
    fn input_prompt_gradient_residual_norm_mode() {
        let mut c = ModelConfig::literal_tiny();
        c.residual = true;
        c.norm = true;
        check_input_prompt_gradient(&c, 12);
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut c = ModelConfig::literal_tiny();
        c.residual = true;
        c.norm = true;
        let b = trained_like(&c, 13);
        let tokens = [2, 4, 6, 8];
        let targets = [4, 6, 8];
        let loss_of = |bb: &Backbone| {
            let t = forward_plain(bb, &tokens).unwrap();
            nll(&t.logits().col_block(0, 3), &targets)
        };
        let trace = forward_plain(&b, &tokens).unwrap();
        let d = concat_columns(&nll_grad(&trace.logits().col_block(0, 3), &targets), &Matrix::zeros(c.vocab_size, 1))
            .unwrap();
        let mut grads = b.zeros_like();
        backward_through(&b, &trace, &d, 0, Some(&mut grads)).unwrap();

        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, t)| t.to_vec()).collect();
        let tensor_count = analytic.len();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for ti in 0..tensor_count - 1 {
            let len = analytic[ti].len();
            for _ in 0..3 {
                let idx = rng.random_range(0..len);
                let eps = 1e-5;
                let mut plus = b.clone();
                plus.tensors_mut()[ti].1[idx] += eps;
                let mut minus = b.clone();
                minus.tensors_mut()[ti].1[idx] -= eps;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let a = analytic[ti][idx];
                assert!(
                    crate::numerics::relative_error(a, numeric) < 1e-4 || (a - numeric).abs() < 1e-9,
                    "tensor {ti} entry {idx}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }
}
