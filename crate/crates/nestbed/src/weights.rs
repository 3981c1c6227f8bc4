//! Log-domain particle weights and multinomial resampling.
//!
//! Weights live in log space from birth to death. Normalization happens
//! through a max-shifted log-sum-exp, so a weight vector like
//! `[-1e300, -1e300]` normalizes exactly instead of flushing to zero, and
//! potentials of wildly different magnitude coexist without overflow.
//!
//! Resampling is multinomial only: ancestor indices are drawn i.i.d. from
//! the categorical distribution given by the normalized weights. Lower
//! variance schemes (systematic, stratified, residual) are deliberately not
//! provided. Downstream smoothing marginalizes over resampling indices under
//! the assumption that they are conditionally i.i.d., and a correlated
//! scheme would silently break that identity.
//!
//! A vector whose entries are all `-inf` is degenerate: there is no
//! categorical distribution to draw from. Every operation that needs one
//! reports [`WeightError::Degenerate`] instead of producing NaN.

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;

/// Index into a particle population.
pub type AncestorIndex = usize;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WeightError {
    #[error("weight vector is empty")]
    Empty,
    #[error("weight vector contains NaN or +inf")]
    NotFinite,
    #[error("all log-weights are -inf, the population is degenerate")]
    Degenerate,
}

/// `log_sum_exp(xs) = log(sum_i exp(xs[i]))`, max-shifted for stability.
///
/// Empty input and all-`-inf` input both give `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// An unnormalized log-weight vector over a particle population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogWeights {
    log: Vec<f64>,
}

impl LogWeights {
    /// Wraps raw log-weights. Entries may be `-inf` (dead particles) but not
    /// NaN or `+inf`.
    pub fn from_log(log: Vec<f64>) -> Result<Self, WeightError> {
        if log.is_empty() {
            return Err(WeightError::Empty);
        }
        if log.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(WeightError::NotFinite);
        }
        Ok(Self { log })
    }

    /// Uniform weights over `k` particles (all zeros in log space).
    pub fn uniform(k: usize) -> Result<Self, WeightError> {
        if k == 0 {
            return Err(WeightError::Empty);
        }
        Ok(Self { log: vec![0.0; k] })
    }

    pub fn len(&self) -> usize {
        self.log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log.is_empty()
    }

    pub fn as_log(&self) -> &[f64] {
        &self.log
    }

    /// True when every particle is dead.
    pub fn is_degenerate(&self) -> bool {
        self.log.iter().all(|&x| x == f64::NEG_INFINITY)
    }

    /// `log(sum_i exp(w_i))`; the log normalizing constant of this vector.
    pub fn log_total(&self) -> f64 {
        log_sum_exp(&self.log)
    }

    /// Normalized linear weights. Two-pass so the result sums to 1 up to the
    /// last ulp, not just up to log-sum-exp rounding.
    pub fn normalized(&self) -> Result<Vec<f64>, WeightError> {
        let total = self.log_total();
        if total == f64::NEG_INFINITY {
            return Err(WeightError::Degenerate);
        }
        let mut w: Vec<f64> = self.log.iter().map(|&x| (x - total).exp()).collect();
        let s: f64 = w.iter().sum();
        for wi in &mut w {
            *wi /= s;
        }
        Ok(w)
    }

    /// Normalized log-weights: `w_i - log_sum_exp(w)`.
    pub fn log_normalized(&self) -> Result<Vec<f64>, WeightError> {
        let total = self.log_total();
        if total == f64::NEG_INFINITY {
            return Err(WeightError::Degenerate);
        }
        Ok(self.log.iter().map(|&x| x - total).collect())
    }

    /// Kish effective sample size, `1 / sum_i wbar_i^2`, clamped to `[1, K]`.
    pub fn ess(&self) -> Result<f64, WeightError> {
        let w = self.normalized()?;
        let sq: f64 = w.iter().map(|&x| x * x).sum();
        Ok((1.0 / sq).clamp(1.0, w.len() as f64))
    }
}

/// Kish effective sample size of a log-weight vector.
pub fn effective_sample_size(weights: &LogWeights) -> Result<f64, WeightError> {
    weights.ess()
}

/// Draws `count` ancestor indices i.i.d. from the categorical distribution
/// with the given log-weights.
///
/// Inverse-CDF with a binary search per draw; draws are independent, which
/// downstream Rao-Blackwellization relies on.
pub fn multinomial_resample(
    weights: &LogWeights,
    count: usize,
    rng: &mut RngStream,
) -> Result<Vec<AncestorIndex>, WeightError> {
    let w = weights.normalized()?;
    let mut cdf = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for &wi in &w {
        acc += wi;
        cdf.push(acc);
    }
    // Guard the tail against rounding so u close to 1 cannot fall off the end.
    if let Some(last) = cdf.last_mut() {
        *last = 1.0;
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let u = rng.uniform_01();
        let idx = cdf.partition_point(|&c| c <= u);
        out.push(idx.min(w.len() - 1));
    }
    Ok(out)
}

/// Single categorical draw from the normalized weights.
pub fn multinomial_draw(weights: &LogWeights, rng: &mut RngStream) -> Result<AncestorIndex, WeightError> {
    Ok(multinomial_resample(weights, 1, rng)?[0])
}
