//! Next-token cross-entropy over token positions.

use serde::{Deserialize, Serialize};

use crate::error::{MopsError, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean negative log-likelihood in nats per token.
    pub nll: f64,
    /// `exp(nll)`.
    pub ppl: f64,
    pub tokens: usize,
}

impl LossReport {
    pub fn from_total(total_nll: f64, tokens: usize) -> Self {
        let nll = total_nll / tokens as f64;
        Self { nll, ppl: nll.exp(), tokens }
    }

    /// Token-weighted aggregate of several reports.
    pub fn combine(reports: &[LossReport]) -> Option<Self> {
        let tokens: usize = reports.iter().map(|r| r.tokens).sum();
        if tokens == 0 {
            return None;
        }
        let total: f64 = reports.iter().map(|r| r.nll * r.tokens as f64).sum();
        Some(Self::from_total(total, tokens))
    }
}

/// Targets for next-token prediction: position `i` predicts token `i + 1`.
pub fn next_token_targets(tokens: &[usize]) -> &[usize] {
    &tokens[1.min(tokens.len())..]
}

fn column_log_softmax(logits: &Matrix, col: usize) -> Vec<f64> {
    let values = logits.column_values(col);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    values.into_iter().map(|v| v - lse).collect()
}

fn check(logits: &Matrix, targets: &[usize]) -> Result<()> {
    if targets.is_empty() {
        return Err(MopsError::Input("no target positions".into()));
    }
    if targets.len() > logits.cols() {
        return Err(MopsError::Input(format!("{} targets for {} logit columns", targets.len(), logits.cols())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= logits.rows()) {
        return Err(MopsError::Input(format!("target id {bad} out of range for vocabulary of {}", logits.rows())));
    }
    Ok(())
}

/// Mean cross-entropy of `targets[i]` under logit column `i`. Columns past
/// `targets.len()` are not scored.
pub fn loss(logits: &Matrix, targets: &[usize]) -> Result<LossReport> {
    check(logits, targets)?;
    let total: f64 = targets.iter().enumerate().map(|(i, &t)| -column_log_softmax(logits, i)[t]).sum();
    Ok(LossReport::from_total(total, targets.len()))
}

/// Loss together with its gradient with respect to every logit (zero in
/// unscored columns).
pub fn loss_and_grad(logits: &Matrix, targets: &[usize]) -> Result<(LossReport, Matrix)> {
    check(logits, targets)?;
    let count = targets.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let logp = column_log_softmax(logits, i);
        total -= logp[t];
        for (r, lp) in logp.into_iter().enumerate() {
            let y = if r == t { 1.0 } else { 0.0 };
            grad.set(r, i, (lp.exp() - y) / count);
        }
    }
    Ok((LossReport::from_total(total, targets.len()), grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let r = loss(&Matrix::zeros(4, 3), &[0, 1, 3]).unwrap();
        assert!((r.nll - 4f64.ln()).abs() < 1e-15);
        assert!((r.ppl - 4.0).abs() < 1e-12);
        assert_eq!(r.tokens, 3);
    }

    #[test]
    fn confident_correct_logits_approach_one() {
        let mut m = Matrix::zeros(5, 2);
        m.set(2, 0, 60.0);
        m.set(4, 1, 60.0);
        let r = loss(&m, &[2, 4]).unwrap();
        assert!(r.ppl >= 1.0 && r.ppl < 1.0 + 1e-12);
    }

    #[test]
    fn matches_scalar_recomputation() {
        let m = Matrix::from_fn(6, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.37 - 0.8);
        let targets = [1, 5, 0];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let mut z = 0.0;
            for r in 0..6 {
                z += m.get(r, i).exp();
            }
            total += z.ln() - m.get(t, i);
        }
        let r = loss(&m, &targets).unwrap();
        assert!((r.nll - total / 3.0).abs() < 1e-12);
        assert_eq!(r.ppl, r.nll.exp());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = Matrix::from_fn(5, 3, |r, c| (r as f64 - c as f64) * 0.3);
        let targets = [4, 0];
        let (_, g) = loss_and_grad(&m, &targets).unwrap();
        let numeric =
            crate::numerics::finite_difference_gradient(|p| loss(p, &targets).unwrap().nll, &m, 1e-6).unwrap();
        assert!(g.max_abs_diff(&numeric) < 1e-8);
        assert!(g.column_values(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn errors() {
        assert!(loss(&Matrix::zeros(4, 2), &[4]).is_err());
        assert!(loss(&Matrix::zeros(4, 2), &[]).is_err());
        assert!(loss(&Matrix::zeros(4, 1), &[0, 1]).is_err());
    }

    #[test]
    fn combine_is_token_weighted() {
        let a = LossReport::from_total(2.0, 2);
        let b = LossReport::from_total(6.0, 3);
        let c = LossReport::combine(&[a, b]).unwrap();
        assert!((c.nll - 8.0 / 5.0).abs() < 1e-15);
        assert!(LossReport::combine(&[]).is_none());
    }
}
