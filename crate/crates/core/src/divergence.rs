//! KL divergences between stochastic policies.
//!
//! Absolute-continuity failures are reported as `f64::INFINITY`, the
//! infinity sentinel. It is propagated through sums and never clamped.

use crate::error::{Error, Result};
use crate::mdp::StochasticPolicy;

/// The value returned when `other` drops support that `reference` has.
pub const KL_INFINITY: f64 = f64::INFINITY;

pub fn is_infinite_kl(value: f64) -> bool {
    value == KL_INFINITY
}

/// `KL(p || q)` in nats for two distributions over the same support.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return KL_INFINITY;
            }
            total += pi * (pi / qi).ln();
        }
    }
    total.max(0.0)
}

/// `sum_s weights[s] * KL(reference(s) || other(s))`.
///
/// States with zero weight are skipped, so a support failure only matters
/// where the weighting measure puts mass.
pub fn expected_kl(reference: &StochasticPolicy, other: &StochasticPolicy, weights: &[f64]) -> Result<f64> {
    reference.same_shape(other)?;
    if weights.len() != reference.n_states() {
        return Err(Error::ShapeMismatch(format!(
            "weights have {} entries for {} states",
            weights.len(),
            reference.n_states()
        )));
    }
    let mut total = 0.0;
    for (s, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            let term = kl(reference.row(s), other.row(s));
            if is_infinite_kl(term) {
                return Ok(KL_INFINITY);
            }
            total += w * term;
        }
    }
    Ok(total)
}
