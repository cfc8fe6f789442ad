//! InfoNCE and its superpixel-grouped variant, as plain functions over
//! embeddings and as differentiable tape operations.

use hcl_autodiff::{Real, Tape, Var};

use crate::error::{invalid, Result};

pub const DEFAULT_TAU: f64 = 0.07;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = dot(v, v).sqrt();
    if (n - 1.0).abs() > 1e-6 {
        return invalid(format!("{what} has norm {n}, expected a unit vector"));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return invalid(format!("temperature must be positive, got {tau}"));
    }
    Ok(())
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `-log(exp(q.k+/tau) / sum_i exp(q.k_i/tau))`, the sum running over the
/// positive and every negative.
pub fn info_nce(q: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    check_unit(q, "query")?;
    check_unit(positive, "positive key")?;
    for n in negatives {
        check_unit(n, "negative key")?;
    }
    let pos = dot(q, positive) / tau;
    let all = std::iter::once(pos).chain(negatives.iter().map(|n| dot(q, n) / tau));
    Ok(log_sum_exp(all) - pos)
}

/// Loss of anchor `i`: keys sharing its group id (its own key included) are
/// positives inside a single log, the rest negatives, scaled by `1/(B-1)`.
pub fn superpixel_info_nce_anchor(i: usize, q: &[f64], keys: &[Vec<f64>], ids: &[u32], tau: f64) -> Result<f64> {
    let b = keys.len();
    if b < 2 || ids.len() != b {
        return invalid(format!("need at least two keys with one id each, got {b} keys and {} ids", ids.len()));
    }
    if i >= b {
        return invalid(format!("anchor {i} has no cross-view key in a batch of {b}"));
    }
    check_tau(tau)?;
    let logits = keys.iter().map(|k| dot(q, k) / tau);
    let pos = logits.clone().zip(ids).filter(|(_, &id)| id == ids[i]).map(|(l, _)| l);
    Ok(-(log_sum_exp(pos) - log_sum_exp(logits)) / (b - 1) as f64)
}

/// Mean of [`superpixel_info_nce_anchor`] over all anchors; anchor `i`'s own
/// key is `keys[i]`.
pub fn superpixel_info_nce(anchors: &[Vec<f64>], keys: &[Vec<f64>], ids: &[u32], tau: f64) -> Result<f64> {
    if anchors.len() != keys.len() {
        return invalid(format!("{} anchors for {} keys", anchors.len(), keys.len()));
    }
    let mut total = 0.0;
    for (i, q) in anchors.iter().enumerate() {
        total += superpixel_info_nce_anchor(i, q, keys, ids, tau)?;
    }
    Ok(total / anchors.len() as f64)
}

/// Same-id mask of a batch, row-major `[B, B]`.
pub fn positive_mask(ids: &[u32]) -> Vec<bool> {
    ids.iter().flat_map(|a| ids.iter().map(move |b| a == b)).collect()
}

/// Differentiable batch loss for anchors `q` and keys `k`, both `[B, d]`.
pub fn superpixel_info_nce_tape<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    ids: &[u32],
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let b = tape.shape(q)[0];
    if b < 2 || ids.len() != b {
        return invalid(format!("batch of {b} with {} ids; need at least two", ids.len()));
    }
    let sims = tape.matmul(q, k, false, true)?;
    let logits = tape.scale(sims, T::from_f64(1.0 / tau));
    let mask = positive_mask(ids);
    let pos = tape.row_logsumexp(logits, Some(&mask))?;
    let all = tape.row_logsumexp(logits, None)?;
    let gap = tape.sub(all, pos)?;
    let total = tape.sum(gap);
    Ok(tape.scale(total, T::from_f64(1.0 / ((b - 1) * b) as f64)))
}
