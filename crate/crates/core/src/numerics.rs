//! Numerically stable primitives shared by the rest of the crate.
//!
//! Logits are accepted as any slice of `f32`/`f64`; probabilities are always
//! returned as `f64`.

use std::cmp::Ordering;

use crate::error::{Error, Result};

fn check_finite<T: Copy + Into<f64>>(values: &[T], what: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::invalid(format!("{what}: empty input")));
    }
    if let Some(i) = values.iter().position(|v| !(*v).into().is_finite()) {
        return Err(Error::invalid(format!("{what}: non-finite entry at index {i}")));
    }
    Ok(())
}

/// Max-subtracted softmax.
pub fn softmax<T: Copy + Into<f64>>(logits: &[T]) -> Result<Vec<f64>> {
    check_finite(logits, "softmax")?;
    let max = logits
        .iter()
        .map(|v| (*v).into())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| ((*v).into() - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

/// Log-softmax via the log-sum-exp identity.
pub fn log_softmax<T: Copy + Into<f64>>(logits: &[T]) -> Result<Vec<f64>> {
    check_finite(logits, "log_softmax")?;
    let max = logits
        .iter()
        .map(|v| (*v).into())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .iter()
        .map(|v| ((*v).into() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    Ok(logits.iter().map(|v| (*v).into() - lse).collect())
}

/// Token ids sorted by descending probability, ties by ascending id.
pub fn sorted_by_prob(probs: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..probs.len()).collect();
    ids.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids
}

/// Slack used when comparing a cumulative mass against `p`, so that summation
/// rounding never excludes the boundary token.
pub const MASS_EPS: f64 = 1e-12;

/// Nucleus truncation: the smallest descending-probability prefix whose
/// cumulative mass reaches `p`.
///
/// If rounding keeps the running sum just below `p` the whole vocabulary is
/// returned.
pub fn top_p_truncate(probs: &[f64], p: f64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("top-p mass {p} outside (0, 1]")));
    }
    check_finite(probs, "top_p_truncate")?;
    let order = sorted_by_prob(probs);
    let mut cum = 0.0;
    let mut keep = order.len();
    for (i, &id) in order.iter().enumerate() {
        cum += probs[id];
        if cum >= p - MASS_EPS {
            keep = i + 1;
            break;
        }
    }
    let mut order = order;
    order.truncate(keep);
    Ok(order)
}

/// Index of the maximum, ties going to the smallest index.
pub fn argmax_tiebreak<T: Copy + Into<f64>>(values: &[T]) -> Result<usize> {
    check_finite(values, "argmax")?;
    let mut best = 0;
    let mut best_val: f64 = values[0].into();
    for (i, v) in values.iter().enumerate().skip(1) {
        let v: f64 = (*v).into();
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    Ok(best)
}
