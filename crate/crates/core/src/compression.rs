//! Magnitude pruning and int8 quantize-dequantize of backbone projections.
//!
//! These are stand-ins for SparseGPT and LLM.int8(): the sparsity patterns
//! and rounding grid match, the weight selection does not, so perplexities
//! are not comparable with runs that used those tools.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, TensorKind};
use crate::error::{MopsError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CompressionSpec {
    Unstructured {
        ratio: f64,
    },
    Structured {
        n: usize,
        m: usize,
    },
    Int8,
    /// Members applied in listed order.
    Composite {
        specs: Vec<CompressionSpec>,
    },
}

impl CompressionSpec {
    pub fn none() -> Self {
        CompressionSpec::Composite { specs: Vec::new() }
    }

    /// `int8` followed by unstructured pruning at `ratio`.
    pub fn int8_then_prune(ratio: f64) -> Self {
        CompressionSpec::Composite { specs: vec![CompressionSpec::Int8, CompressionSpec::Unstructured { ratio }] }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CompressionSpec::Unstructured { ratio } => {
                if !(0.0..1.0).contains(ratio) {
                    return Err(MopsError::Config(format!("ratio must lie in [0, 1), got {ratio}")));
                }
            }
            CompressionSpec::Structured { n, m } => {
                if !(0 < *n && n < m) {
                    return Err(MopsError::Config(format!("structured pruning needs 0 < n < m, got {n}:{m}")));
                }
            }
            CompressionSpec::Int8 => {}
            CompressionSpec::Composite { specs } => specs.iter().try_for_each(Self::validate)?,
        }
        Ok(())
    }

    /// Short human label, e.g. `int8+75%` or `2:4`.
    pub fn label(&self) -> String {
        match self {
            CompressionSpec::Unstructured { ratio } => format!("{}%", (ratio * 100.0).round()),
            CompressionSpec::Structured { n, m } => format!("{n}:{m}"),
            CompressionSpec::Int8 => "int8".into(),
            CompressionSpec::Composite { specs } if specs.is_empty() => "dense".into(),
            CompressionSpec::Composite { specs } => specs.iter().map(Self::label).collect::<Vec<_>>().join("+"),
        }
    }
}

/// Tensor families touched by compression: the attention and feed-forward
/// projections. Embeddings, norms and prompts are exempt.
pub fn default_scope(kind: TensorKind) -> bool {
    kind.is_projection()
}

fn by_magnitude(values: &[f64], a: usize, b: usize) -> Ordering {
    values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b))
}

/// Zeroes the `round(ratio·len)` smallest-magnitude entries.
pub fn prune_slice_unstructured(values: &mut [f64], ratio: f64) {
    let count = ((ratio * values.len() as f64).round() as usize).min(values.len());
    if count == 0 {
        return;
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| by_magnitude(values, a, b));
    for &i in &order[..count] {
        values[i] = 0.0;
    }
}

/// N:M pruning of each row of length `row_len`. A short final block of
/// length `r` keeps `ceil(r·(M−N)/M)` entries.
pub fn prune_slice_structured(values: &mut [f64], row_len: usize, n: usize, m: usize) {
    for row in values.chunks_mut(row_len.max(1)) {
        for block in row.chunks_mut(m) {
            let len = block.len();
            let keep = if len == m { m - n } else { (len * (m - n)).div_ceil(m) };
            let mut order: Vec<usize> = (0..len).collect();
            order.sort_by(|&a, &b| by_magnitude(block, a, b));
            for &i in &order[..len - keep] {
                block[i] = 0.0;
            }
        }
    }
}

/// Largest value not below `x` whose low 8 mantissa bits are clear. With
/// such a scale every `q·scale` for `|q| ≤ 127` is exact.
fn trim_mantissa_up(x: f64) -> f64 {
    let bits = x.to_bits();
    if bits & 0xff == 0 {
        x
    } else {
        f64::from_bits((bits | 0xff) + 1)
    }
}

/// Symmetric per-tensor int8 round trip. Returns the scale used.
pub fn quantize_slice_int8(values: &mut [f64]) -> f64 {
    let max = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return 0.0;
    }
    let scale = trim_mantissa_up(max / 127.0);
    for v in values.iter_mut() {
        let q = (*v / scale).round_ties_even().clamp(-127.0, 127.0);
        *v = q * scale;
    }
    scale
}

fn apply_in_place(backbone: &mut Backbone, spec: &CompressionSpec, scope: &dyn Fn(TensorKind) -> bool) {
    if let CompressionSpec::Composite { specs } = spec {
        for s in specs {
            apply_in_place(backbone, s, scope);
        }
        return;
    }
    let rows = backbone.tensor_row_lengths();
    for ((kind, t), row_len) in backbone.tensors_mut().into_iter().zip(rows) {
        if !scope(kind) {
            continue;
        }
        match spec {
            CompressionSpec::Unstructured { ratio } => prune_slice_unstructured(t, *ratio),
            CompressionSpec::Structured { n, m } => prune_slice_structured(t, row_len, *n, *m),
            CompressionSpec::Int8 => {
                quantize_slice_int8(t);
            }
            CompressionSpec::Composite { .. } => unreachable!("flattened above"),
        }
    }
}

/// Returns a compressed copy; the input is left untouched.
pub fn compress_scoped(
    backbone: &Backbone,
    spec: &CompressionSpec,
    scope: &dyn Fn(TensorKind) -> bool,
) -> Result<Backbone> {
    spec.validate()?;
    let mut out = backbone.clone();
    apply_in_place(&mut out, spec, scope);
    Ok(out)
}

pub fn compress(backbone: &Backbone, spec: &CompressionSpec) -> Result<Backbone> {
    compress_scoped(backbone, spec, &default_scope)
}

pub fn prune_unstructured(backbone: &Backbone, ratio: f64) -> Result<Backbone> {
    compress(backbone, &CompressionSpec::Unstructured { ratio })
}

pub fn prune_structured(backbone: &Backbone, n: usize, m: usize) -> Result<Backbone> {
    compress(backbone, &CompressionSpec::Structured { n, m })
}

pub fn quantize_int8(backbone: &Backbone) -> Result<Backbone> {
    compress(backbone, &CompressionSpec::Int8)
}

/// Fraction of exactly-zero entries across in-scope tensors.
pub fn sparsity(backbone: &Backbone) -> f64 {
    let (zeros, total) = backbone
        .tensors()
        .into_iter()
        .filter(|(k, _)| default_scope(*k))
        .fold((0usize, 0usize), |(z, n), (_, t)| (z + t.iter().filter(|v| **v == 0.0).count(), n + t.len()));
    if total == 0 {
        0.0
    } else {
        zeros as f64 / total as f64
    }
}
